"""G-buffer conditioned iterative photorealistic transfer pipeline."""

__version__ = "0.1.0"
