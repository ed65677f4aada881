"""Monotone adaptive Q1 finite-element solver for hyperbolic conservation laws."""

__version__ = "0.1.0"
