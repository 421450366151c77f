"""Tests for the DCO pipeline."""
