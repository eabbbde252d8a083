"""Fairness-aware re-ranking of recommendation lists with per-user diversity tolerance."""

__version__ = "0.1.0"
