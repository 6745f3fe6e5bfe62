"""Decayed-attention vision transformer toolkit on a small NumPy autodiff core."""

__version__ = "0.1.0"
