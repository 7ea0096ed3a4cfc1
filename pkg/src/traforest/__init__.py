"""Transformation and distributional survival forests."""
