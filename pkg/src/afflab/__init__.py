"""Transfer of passive vision models to pixel-wise picking affordances."""

__version__ = "0.1.0"
