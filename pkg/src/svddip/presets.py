"""Named acquisition and reconstruction settings.

Each preset is a set of overrides on top of the desk defaults, keyed by the
run-spec section they belong to. The full-size presets describe the
acquisition settings of public benchmarks; they are approximations and need
far more compute than the desk preset.
"""

from __future__ import annotations

from .errors import InvalidArgumentError

DESK = {
    "geometry": {
        "kind": "parallel",
        "n_px": 64,
        "num_angles": 20,
        "num_detector_pixels": 95,
        "detector_spacing": 1.0,
        "pixel_size": 1.0 / 64,
        "matrix_file": "",
    },
    "noise": {"spec": "gaussian 0.05", "mu_max": 81.35858},
    "model": {
        "channels": (32, 32, 32),
        "skip_channels": (4, 4, 4),
        "kernel_size": 3,
        "leaky_slope": 0.2,
        "sigmoid_output": True,
        "norm_groups": None,
    },
    "pretrain": {
        "dataset_size": 200,
        "epochs": 20,
        "batch_size": 8,
        "lr": 1e-3,
        "seed": 0,
        "max_ellipses": 12,
        "fbp_filter": "hann",
    },
    "dip": {
        "iterations": 5000,
        "lr_dip": 1e-3,
        "lr_edip": 1e-4,
        "lr_svd_dip": 3e-2,
        "gamma": 1e-4,
        "data_loss": "squared-l2",
        "svd_addresses": None,
        "skip_first_down": 0,
        "truncation": "none",
        "train_unreplaced": False,
        "train_norms": True,
        "noise_std": 0.1,
        "n0": 4096.0,
        "psnr_range": None,
        "dtype": "float32",
    },
    "output": {"flush_every": 100, "pgm": True},
}

PAPER_MODEL = {"channels": (128,) * 5, "skip_channels": (4,) * 5}

PRESETS = {
    "desk": {},
    # Fan-beam data: the forward operator is supplied as a matrix file.
    "lotus": {
        "geometry": {"kind": "matrix", "n_px": 128, "num_angles": 20, "num_detector_pixels": 429},
        "noise": {"spec": "none"},
        "model": {**PAPER_MODEL, "sigmoid_output": False},
        "dip": {"data_loss": "mean-squared", "gamma": 1e-4, "iterations": 100000},
    },
    "lodopab": {
        "geometry": {"n_px": 362, "num_angles": 200, "num_detector_pixels": 513, "pixel_size": 0.26 / 362},
        "noise": {"spec": "poisson 4096"},
        "model": PAPER_MODEL,
        "dip": {"data_loss": "poisson", "gamma": 4.0, "iterations": 50000},
    },
    "mayo-sparse": {
        "geometry": {"n_px": 362, "num_angles": 200, "num_detector_pixels": 513, "pixel_size": 0.26 / 362},
        "noise": {"spec": "poisson 4096"},
        "model": PAPER_MODEL,
        "dip": {"data_loss": "poisson", "gamma": 7.0, "iterations": 200000, "skip_first_down": 3},
    },
    "mayo-full": {
        "geometry": {"n_px": 362, "num_angles": 1000, "num_detector_pixels": 513, "pixel_size": 0.26 / 362},
        "noise": {"spec": "poisson 4096"},
        "model": PAPER_MODEL,
        "dip": {"data_loss": "poisson", "gamma": 7.0, "iterations": 200000, "skip_first_down": 3},
    },
}


def preset(name: str) -> dict:
    """Desk defaults with the named preset's overrides applied (a fresh copy)."""
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    out = {section: dict(values) for section, values in DESK.items()}
    for section, values in PRESETS[name].items():
        out[section].update(values)
    return out
