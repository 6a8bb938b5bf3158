"""Hybrid playlist continuation: feature-based match classifier, WMF baseline and offline evaluation."""

__version__ = "0.1.0"
