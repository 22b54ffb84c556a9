"""Frame-rate enhancement with a conditional GAN trained on frame triplets."""

__version__ = "0.1.0"
