"""unshuffle - multi-environment training with head-variance regularization."""

__version__ = "0.1.0"
