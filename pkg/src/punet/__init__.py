"""Predict-and-update audio-visual speech recognition on a synthetic corpus, in numpy."""

__version__ = "0.1.0"
