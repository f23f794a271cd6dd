"""Desmoothing plug-ins for linear graph-convolution recommenders."""

__version__ = "0.1.0"
