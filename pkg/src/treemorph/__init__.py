"""Two-side orchard row reconstruction, semantic alignment and per-tree morphology."""

__version__ = "0.1.0"
