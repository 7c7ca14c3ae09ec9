"""Adversarial diffusion tuning on low-dimensional synthetic data."""

__version__ = "0.1.0"
