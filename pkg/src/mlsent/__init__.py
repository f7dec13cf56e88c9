"""Small transformer encoders for multi-label sentiment classification of short texts."""

__version__ = "0.1.0"
