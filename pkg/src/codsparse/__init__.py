"""Desk-scale transformer diagnostics for residual-stream variance and layer effectiveness."""

__version__ = "0.1.0"
