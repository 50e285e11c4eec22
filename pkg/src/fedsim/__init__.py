"""Deterministic federated-learning simulator with chunk-scheduled parallel training."""

__version__ = "0.1.0"
