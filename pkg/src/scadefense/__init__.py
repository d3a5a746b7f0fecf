"""Sparse coding architectures for robustness to model inversion attacks."""
