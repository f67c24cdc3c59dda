"""Modality-incremental continual learning lab: merge-then-realign and baselines."""

__version__ = "0.1.0"
