"""Zero-shot object counting: prototype-guided exemplar selection for a density-map counter."""

__version__ = "0.1.0"
