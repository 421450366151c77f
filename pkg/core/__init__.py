"""Core modules for the conversion-based DCO pipeline."""
