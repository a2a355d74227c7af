"""Symmetric deformable 3D registration with a gradient-of-field parameterization.

A small reverse-mode autodiff engine on numpy drives a shared-encoder
network that predicts per-axis grid increments; prefix sums of positive
increments give sampling fields that cannot fold along any axis.
"""

__version__ = "0.1.0"
