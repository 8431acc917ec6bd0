"""Numerical laboratory for interacting particle systems with radial potentials."""

__version__ = "0.1.0"
