"""Desk-scale fish detection in degraded underwater images, built from numpy
kernels with a gradient oracle for every differentiable op."""

__version__ = "0.1.0"
