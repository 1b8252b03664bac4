"""Hyperbolic clinical-concept graphs, risk-horizon retrieval and next-visit evaluation."""

__version__ = "0.1.0"
