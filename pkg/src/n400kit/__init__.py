"""Surprisal, semantic similarity and mixed-model analysis of single-trial N400 data."""

__version__ = "0.1.0"
