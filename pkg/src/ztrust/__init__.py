"""Seedable simulator of a blockchain-backed federated zero-trust architecture."""

__version__ = "0.1.0"
