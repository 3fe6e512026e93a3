"""Federated graph learning simulator and gradient-leakage attack toolkit."""

__version__ = "0.1.0"
