"""Decentralised Bayesian swarm search for a signal source."""

__version__ = "0.1.0"
