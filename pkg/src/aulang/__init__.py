"""Explainable facial action unit recognition with joint caption generation."""

__version__ = "0.1.0"
