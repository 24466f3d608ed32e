"""Deterministic simulator for federated domain generalization with interpolated style transfer."""

__version__ = "0.1.0"
