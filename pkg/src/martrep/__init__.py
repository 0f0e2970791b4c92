"""Discrete-time martingale representations and their convergence."""

__version__ = "0.1.0"
