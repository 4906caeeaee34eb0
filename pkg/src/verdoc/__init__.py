"""Training, verifying and attacking robust classifiers over PDF-like document trees."""

__version__ = "0.1.0"
