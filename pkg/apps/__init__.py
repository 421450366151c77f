"""Application entry points."""

