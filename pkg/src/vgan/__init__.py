"""Volumetric transformer-GAN segmentation engine."""

__version__ = "0.1.0"
