"""Desk-scale text-driven image restoration.

A frozen latent-diffusion prior plus a trainable restoration adaptor,
driven by semantic prompts and parameter-embedded restoration prompts,
trained on a synthetic parameterized degradation pipeline.
"""

from .config import RunConfig

__all__ = ["RunConfig"]
__version__ = "0.1.0"
