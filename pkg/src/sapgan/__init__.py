"""Self-attention progressive GAN with two-timescale training, sized for CPU runs."""

__version__ = "0.1.0"
