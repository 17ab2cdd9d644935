"""Magnetic-sequence indoor localization with multi-scale TCN + LSTM models."""

__version__ = "0.1.0"
