"""Subject-aware multimodal self-supervised learning with group-fairness evaluation."""

__version__ = "0.1.0"
