"""Concept gradient attribution for feed-forward networks."""

__version__ = "0.1.0"
