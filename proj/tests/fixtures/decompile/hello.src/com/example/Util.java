package com.example;

class Util {
    static String host() {
        return "ht" + "tp://" + "example.invalid";
    }
}
