"""Saliency-regularized GRPO for chain-of-thought pruning on a toy decoder."""

__version__ = "0.1.0"
