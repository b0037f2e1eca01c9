"""Spatiotemporally disaggregated sketches for network-wide measurement."""

__version__ = "0.1.0"
