"""Dual-query vision-language alignment at desk scale, on a numpy autodiff core."""

__version__ = "0.1.0"
