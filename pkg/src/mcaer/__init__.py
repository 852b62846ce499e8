"""Multi-cue adaptive emotion recognition network."""

__version__ = "0.1.0"
