"""Differentiable latent multi-view graph engine for relation extraction."""

__version__ = "0.1.0"
