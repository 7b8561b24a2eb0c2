"""Closed-loop training and evaluation of a multimodal ego trajectory predictor."""

__version__ = "0.1.0"
