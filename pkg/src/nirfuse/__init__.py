"""NIR-guided RGB denoising with selective feature fusion."""

__version__ = "0.1.0"
