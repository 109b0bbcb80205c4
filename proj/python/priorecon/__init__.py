"""Prior-informed accelerated MRI reconstruction."""

import json

from ._core import (
    PrioreconError,
    center_disc_count,
    fft2c,
    ifft2c,
    nrmse,
    poisson_mask,
    psnr,
    register,
    rss,
    ssim,
    ssim_loss,
    undersample,
    wilcoxon,
    zero_filled,
)
from . import _core

__all__ = [
    "PrioreconError",
    "center_disc_count",
    "fft2c",
    "ifft2c",
    "nrmse",
    "poisson_mask",
    "psnr",
    "register",
    "rss",
    "ssim",
    "ssim_loss",
    "undersample",
    "wilcoxon",
    "zero_filled",
    "load_experiment",
    "generate_dataset",
    "run_experiment",
]


def load_experiment(path):
    return _core.load_experiment(str(path))


def generate_dataset(config):
    return _core.generate_dataset(json.dumps(config))


def run_experiment(config):
    return _core.run_experiment(json.dumps(config))
