"""Classifier-guided toy diffusion with entropy-driven guidance scaling and entropy-constrained classifiers."""

__version__ = "0.1.0"
