"""Python access to the facecycle numeric core and run commands."""

from ._core import (
    __version__,
    estimate_sigma,
    normalize_weight,
    frechet_distance,
    psnr,
    ssim,
    landmark_nme,
    kl_divergence,
    ttur_steps,
    learning_rate,
    make_toy_domains,
    load_run_config,
    train,
)

__all__ = [
    "estimate_sigma",
    "normalize_weight",
    "frechet_distance",
    "psnr",
    "ssim",
    "landmark_nme",
    "kl_divergence",
    "ttur_steps",
    "learning_rate",
    "make_toy_domains",
    "load_run_config",
    "train",
]
