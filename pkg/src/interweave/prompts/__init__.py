"""Versioned prompt templates shipped with the package."""
