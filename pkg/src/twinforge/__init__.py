"""Behavioural clone detection for NFT digital twins."""

__version__ = "0.1.0"
