"""Masked-autoencoder pre-training and track-supervised 3D cloud regression on synthetic scenes."""

__version__ = "0.1.0"
