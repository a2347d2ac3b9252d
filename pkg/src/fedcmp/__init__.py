"""Federated indirect treatment comparison from aggregated site data."""

__version__ = "0.1.0"
