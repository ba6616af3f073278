"""Certified robustness radii and certifiable robust training for late-fusion classifiers."""

__version__ = "0.1.0"
