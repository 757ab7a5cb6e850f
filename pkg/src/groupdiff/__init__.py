"""Diffusion models for grouped motion features with balanced per-group training."""

__version__ = "0.1.0"
