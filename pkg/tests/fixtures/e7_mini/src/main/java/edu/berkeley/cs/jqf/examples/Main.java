package edu.berkeley.cs.jqf.examples;

public class Main {
    public static void main(String[] args) {
        System.out.println("confetti-mini " + String.join(" ", args));
    }
}
