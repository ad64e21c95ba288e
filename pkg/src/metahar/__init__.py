"""Federated meta-learning for human activity recognition across heterogeneous users."""
__version__ = "0.1.0"
