"""Federated news recommendation with a server-side news encoder, a shared
light-weight user model and secure aggregation of client uploads."""

__version__ = "0.1.0"
