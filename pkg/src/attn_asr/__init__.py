"""Attention-based encoder-decoder phoneme recognizer on a numpy autodiff engine."""

__version__ = "0.1.0"
