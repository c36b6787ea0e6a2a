"""Relation-based domain adaptation for referring-expression grounding on
synthetic paired domains."""

__version__ = "0.1.0"
