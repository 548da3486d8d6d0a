"""Region-of-interest concealment attacks on a from-scratch Vision Transformer."""

__version__ = "0.1.0"
