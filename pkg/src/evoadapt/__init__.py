"""Evolutionary search over training-free vision-language adaptation algorithms."""

__version__ = "0.1.0"
