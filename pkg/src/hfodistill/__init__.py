"""Distilling pathological HFO events from high-recall detector output."""

__version__ = "0.1.0"
