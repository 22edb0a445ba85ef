"""Text-conditioned generation of classifier-head weights by diffusion."""

__version__ = "0.1.0"
