"""Frozen transformer embedding exporter for the GDEB dataset format."""

__version__ = "0.1.0"
