"""Contextualized transducer speech recognition on a synthetic corpus."""

__version__ = "0.1.0"
