"""Scale calibrated training with scale-specific batch normalization."""

__version__ = "0.1.0"
