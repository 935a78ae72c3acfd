"""splatlab: CPU trainer for 3D Gaussian splatting with frequency-aware
selective densification and a reproducible experiment harness."""

__version__ = "0.1.0"
