"""Level-k interactive prediction and planning on synthetic driving scenes."""
__version__ = "0.1.0"
