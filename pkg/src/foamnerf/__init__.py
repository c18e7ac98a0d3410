"""Generative radiance-field models with exact foam rendering and HMC inference."""

__version__ = "0.1.0"
