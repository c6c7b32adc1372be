"""Generative invertible networks for valve images: GAN, inverse CNN, feature-space analytics."""

__version__ = "0.1.0"
