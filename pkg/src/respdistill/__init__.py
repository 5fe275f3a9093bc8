"""Response-based distillation with adaptive pseudo-label selection for incremental dense detectors."""

__version__ = "0.1.0"
