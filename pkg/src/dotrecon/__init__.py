"""Diffuse optical tomography by layer stripping in the source position."""

__version__ = "0.1.0"
