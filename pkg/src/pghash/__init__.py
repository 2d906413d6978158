"""Periodic Gaussian hashing for memory-constrained, on-device neuron pruning."""

__version__ = "0.1.0"
