"""Desk-scale mixture-of-experts dynamic Gaussian splatting on the CPU."""

__version__ = "0.1.0"
