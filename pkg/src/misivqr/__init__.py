"""Identification and inference for IV quantile regression with a misclassified treatment."""

__version__ = "0.1.0"
