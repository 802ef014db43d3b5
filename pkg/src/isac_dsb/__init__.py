"""Electromagnetic property sensing and channel reconstruction with a diffusion Schrodinger bridge."""

__version__ = "0.1.0"
