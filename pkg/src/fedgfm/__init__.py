"""Federated graph foundation model pre-training simulator."""

__version__ = "0.1.0"
