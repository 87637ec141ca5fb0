"""Federated cross-market sequential recommendation with semantic soft targets."""

__version__ = "0.1.0"
