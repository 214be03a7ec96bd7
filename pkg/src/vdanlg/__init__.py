"""Variational domain-adaptation generator for dialogue-act-driven NLG."""

__version__ = "0.1.0"
