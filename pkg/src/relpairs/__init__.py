"""Relevant aircraft pair filtering and probabilistic sector complexity forecasting."""

__version__ = "0.1.0"
