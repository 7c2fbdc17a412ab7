"""Frequency-adaptive tensor neural networks for high-dimensional multi-scale PDEs."""

__version__ = "0.1.0"
