"""Numerical homogenization of random discrete lattice energies."""
__version__ = "0.1.0"
