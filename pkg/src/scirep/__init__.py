"""Reproducible experiment orchestration: infer, containerize, validate, package."""

__version__ = "0.1.0"
