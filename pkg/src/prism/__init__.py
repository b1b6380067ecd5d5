"""Streaming text-to-motion generation on a joint-factorized latent grid."""

__version__ = "0.1.0"
