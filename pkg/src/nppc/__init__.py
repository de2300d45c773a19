"""Preprocessing-enhanced image compression for machine vision: a trainable filter
in front of a standard codec, optimized through a differentiable proxy."""

__version__ = "0.1.0"
