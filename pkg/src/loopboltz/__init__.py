"""Boltzmann-weighted protein loop sampling by sequential Monte Carlo."""

__version__ = "0.1.0"
