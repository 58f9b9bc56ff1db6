"""Identifiability lab for content/style latent-variable models."""

__version__ = "0.1.0"
