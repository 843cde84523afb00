"""Uncertainty-aware audio-visual fusion with calibrated, ordinal latent distributions."""

__version__ = "0.1.0"
