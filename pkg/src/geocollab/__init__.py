"""Collaborative 3D GIS: synchronous design sessions plus an asynchronous review service."""

__version__ = "0.1.0"
