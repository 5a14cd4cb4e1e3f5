package fixture.benign;

// [fixture:benign]
public class Greeter {
    public static void main(String[] args) {
        System.out.println("Hello, " + "world");
    }
}
