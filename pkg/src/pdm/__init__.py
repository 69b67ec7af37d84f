"""Prototype-driven multi-feature generation for cross-modality embedding alignment."""

__version__ = "0.1.0"
