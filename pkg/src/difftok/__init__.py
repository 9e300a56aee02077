"""difftok: desk-scale diffusion image tokenizers.

A library and CLI for training image tokenizers whose decoder is a
conditional diffusion model driven by a single flow-matching L2 loss, plus a
GAN-perceptual baseline, a class-conditional latent diffusion generator, and
the evaluation harness (PSNR, SSIM, feature-space Frechet distances) to
compare them.
"""

__version__ = "0.1.0"

from .schedules import (  # noqa: F401
    NoiseSchedule,
    WeightingFunction,
    add_noise,
    alpha_sigma,
    cosine_schedule,
    effective_weighting,
    elbo_condition_check,
    flow_matching_schedule,
    l2_loss,
    log_snr,
    regression_target,
    to_sample_prediction,
)
