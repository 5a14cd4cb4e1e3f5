package fixture.s3;

import java.awt.color.ColorSpace;
import java.awt.color.ICC_ColorSpace;
import java.awt.image.BufferedImage;
import java.awt.image.ColorConvertOp;

// [fixture:s3]
public class Paint extends java.applet.Applet {
    public void init() {
        ColorSpace cs = new ICC_ColorSpace(java.awt.color.ICC_Profile.getInstance(ColorSpace.CS_sRGB));
        BufferedImage src = Raster.crafted(0x10, 0x7fffffff);
        BufferedImage dst = new BufferedImage(16, 16, BufferedImage.TYPE_INT_RGB);
        new ColorConvertOp(cs, null).filter(src, dst);
        Raster.spray("A" + "A" + "A" + "A");
    }
}
