"""Two-stage diffusion across resolutions: block noise, patch-wise blurring and a relay sampler."""

__version__ = "0.1.0"
