"""Typographic attack benchmark harness for black-box Vision-LLM endpoints."""

__version__ = "0.1.0"
