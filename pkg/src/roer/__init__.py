"""Regularized optimal experience replay: f-divergence priority machinery,
desk-scale actor-critic agents, and exact tabular oracles."""

__version__ = "0.1.0"
