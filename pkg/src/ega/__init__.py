"""Federated learning with aggregation in a learned encoded domain."""

__version__ = "0.1.0"
