"""Latent factor generative model for cross-sectional equity returns."""

__version__ = "0.1.0"
