"""Exception types raised across the DCO pipeline."""


class DcoError(Exception):
    """Base class for pipeline errors."""


class StructuralError(DcoError, ValueError):
    """Feature/vector shape does not match the model structure."""


class EmptyFeatureError(StructuralError):
    """A multi-value feature was given no values."""


class ConfigError(DcoError, ValueError):
    """Invalid configuration; message starts with the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ServingError(DcoError, LookupError):
    """Ad cannot be rendered (unknown to both table and catalog)."""


class CatalogMismatchError(DcoError):
    """Model snapshot and ad catalog were produced for different models."""
