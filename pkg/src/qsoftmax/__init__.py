"""Softmax quantization-bias simulation and correction."""

__version__ = "0.1.0"
