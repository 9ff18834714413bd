"""Hybrid latent Gaussian model and random forest methods for spatio-temporal data."""

__version__ = "0.1.0"
