"""Coupled per-node continuous normalizing flows on labeled graphs."""

__version__ = "0.1.0"
