"""Subordinated killed diffusions, their quasi-stationary law, and Wasserstein rates."""

__version__ = "0.1.0"
