"""Self-supervised on-device fine-tuning of a pose-regression CNN, at desk scale."""

__version__ = "0.1.0"
