"""Safe switching-controller synthesis for delay hybrid automata."""

__version__ = "0.1.0"
