"""Subspace regression on the Grassmann manifold and its numerical consumers."""

__version__ = "0.1.0"
