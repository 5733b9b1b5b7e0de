"""Calibrated ensembles of binary segmenters."""

__version__ = "0.1.0"
