"""Encrypted transformer-layer kernels over a leveled homomorphic backend."""
