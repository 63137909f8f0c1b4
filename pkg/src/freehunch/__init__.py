"""Denoiser-covariance tracking and reconstruction guidance for diffusion posterior sampling."""

__version__ = "0.1.0"
