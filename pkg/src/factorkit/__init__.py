"""Information-factorization conditional VAE-GAN for single-attribute image editing."""

__version__ = "0.1.0"
