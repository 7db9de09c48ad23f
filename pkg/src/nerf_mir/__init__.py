"""Masked multi-view image restoration with a small numpy radiance field."""

__version__ = "0.1.0"
