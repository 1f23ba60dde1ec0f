"""Temporal preservation convolutional networks for frame-level action localization, in numpy."""

__version__ = "0.1.0"
