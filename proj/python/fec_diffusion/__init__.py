"""Exact-inversion DDIM sampling and editing on a toy attention denoiser.

Latents are float64 numpy arrays shaped (channels, height, width); the default
geometry is 4 x 16 x 16.
"""

from ._core import (
    FormatError,
    NumericalError,
    alpha_bars,
    check_batch_invariance,
    edit,
    latent_loss,
    predict_noise,
    psnr,
    reconstruct,
    ssim,
    synthetic_latent,
    timestep_plan,
)

METHODS = ("direct", "neg-prompt", "fec-ref", "fec-noise", "fec-kv-reuse", "fec-v-reuse")

__all__ = [
    "METHODS",
    "FormatError",
    "NumericalError",
    "alpha_bars",
    "check_batch_invariance",
    "edit",
    "latent_loss",
    "predict_noise",
    "psnr",
    "reconstruct",
    "ssim",
    "synthetic_latent",
    "timestep_plan",
]
