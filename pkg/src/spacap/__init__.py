"""Spatiality-guided 3D dense captioning on synthetic scenes."""

__version__ = "0.1.0"
