"""Weighted-sum-rate optimisation for multi-waveguide pinching-antenna systems."""

__version__ = "0.1.0"
