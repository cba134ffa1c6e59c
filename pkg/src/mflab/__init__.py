"""Numerical laboratory for mean-field, pair-excitation and Fock-space boson dynamics."""

__version__ = "0.1.0"
