"""Gradient-based batch-size scheduling with a hyper-learning agent."""

__version__ = "0.1.0"
