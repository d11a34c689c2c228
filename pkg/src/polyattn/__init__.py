"""Softmax and scaled-polynomial attention, norm-bound verification, and desk-scale experiments."""

__version__ = "0.1.0"
