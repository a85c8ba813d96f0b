"""Lightweight student question-answering simulator distilled from an LLM."""

__version__ = "0.1.0"
