"""Mask-centric predictive world model with a diffusion action policy."""

__version__ = "0.1.0"
