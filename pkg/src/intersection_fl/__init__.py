"""Federated imitation learning testbed for unsignalized-intersection vehicle control."""

__version__ = "0.1.0"
