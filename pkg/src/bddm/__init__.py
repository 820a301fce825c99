"""Bilateral denoising diffusion models on low-dimensional synthetic data."""

__version__ = "0.1.0"
