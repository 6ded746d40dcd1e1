"""Polynomial safety-certificate synthesis and runtime filtering."""

__version__ = "0.1.0"
