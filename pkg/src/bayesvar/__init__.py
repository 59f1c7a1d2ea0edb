"""Finite-horizon Bayesian filtering, variational and control identities."""

__version__ = "0.1.0"
