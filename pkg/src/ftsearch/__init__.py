"""Differentiable search over fine-tuning strategies for pre-trained GNNs."""

__version__ = "0.1.0"
