"""Adaptive imitation learning across dynamics families, on a small numpy autodiff core."""

__version__ = "0.1.0"
