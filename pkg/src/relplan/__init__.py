"""Learned object-relevance heuristics for a pick-and-place task planner."""

__version__ = "0.1.0"
