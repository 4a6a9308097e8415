"""Decentralized multirobot quantile estimation with utility-gated broadcasts."""

__version__ = "0.1.0"
