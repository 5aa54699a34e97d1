"""Whittle-index probing and threshold sampling for AoI minimization with energy-harvesting sources."""

__version__ = "0.1.0"
