"""Attractor models: backbone proposals refined to fixed points, with implicit gradients."""

__version__ = "0.1.0"
