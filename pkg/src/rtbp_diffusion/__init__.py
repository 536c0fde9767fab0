"""Numerical checks of an Arnold-diffusion mechanism in the elliptic restricted three-body problem."""

__version__ = "0.1.0"
