"""Measurement noise models."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError
from .geometry import MatrixOperator
from .operators import Sinogram, _sino_array

#: Poisson counts are clamped here before taking the log.
MIN_COUNT = 0.1

#: Normalisation constant that maps attenuation values into [0, 1].
MU_MAX = 81.35858

DEFAULT_PHOTONS = 4096


def add_gaussian_noise(sino, rel_level: float, rng_seed: int) -> Sinogram:
    """Add i.i.d. N(0, sigma^2) with ``sigma = rel_level * mean(|y|)``."""
    if rel_level < 0:
        raise InvalidArgumentError(f"rel_level must be >= 0, got {rel_level}")
    clean = _sino_array(sino)
    if rel_level == 0:
        return Sinogram(clean.copy(), "gaussian 0")
    sigma = rel_level * float(np.mean(np.abs(clean)))
    rng = np.random.default_rng(rng_seed)
    noisy = clean + rng.normal(0.0, sigma, size=clean.shape)
    return Sinogram(noisy, f"gaussian {rel_level:g}", {"sigma": sigma, "seed": rng_seed})


def poisson_counts(projection: np.ndarray, n0: float, rng_seed: int) -> np.ndarray:
    """Pre-log photon counts ``N1 ~ Pois(N0 * exp(-Ax))``."""
    rng = np.random.default_rng(rng_seed)
    return rng.poisson(n0 * np.exp(-np.asarray(projection))).astype(np.float64)


def simulate_poisson_prelog(
    image_mu: np.ndarray,
    op: MatrixOperator,
    n0: float = DEFAULT_PHOTONS,
    mu_max: float = MU_MAX,
    rng_seed: int = 0,
    expectation: bool = False,
) -> Sinogram:
    """Simulate post-log data from attenuation values, normalised by ``mu_max``.

    With ``expectation=True`` no sampling happens and ``A x / mu_max`` is
    returned exactly.
    """
    if n0 <= 0:
        raise InvalidArgumentError(f"N0 must be positive, got {n0}")
    proj = op.forward(image_mu)
    if np.any(proj < 0):
        raise InvalidArgumentError("projection has negative entries; Poisson model needs Ax >= 0")
    if expectation:
        return Sinogram(proj / mu_max, "none", {"mu_max": mu_max})
    return _sample_postlog(proj, n0, mu_max, rng_seed)


def _sample_postlog(proj: np.ndarray, n0: float, mu_max: float, rng_seed: int) -> Sinogram:
    counts = np.maximum(poisson_counts(proj, n0, rng_seed), MIN_COUNT)
    y = -np.log(counts / n0) / mu_max
    return Sinogram(y, f"poisson {n0:g}", {"mu_max": mu_max, "seed": rng_seed})


def add_noise(sino, spec: str, rng_seed: int, mu_max: float = MU_MAX) -> Sinogram:
    """Dispatch on a noise descriptor (``none`` | ``gaussian <rel>`` | ``poisson <N0>``).

    The Poisson branch treats ``sino`` as the clean normalised projection
    ``A x / mu_max``.
    """
    kind, *args = spec.split()
    clean = _sino_array(sino)
    if kind == "none":
        return Sinogram(clean.copy(), "none")
    if kind == "gaussian":
        return add_gaussian_noise(clean, float(args[0]), rng_seed)
    if kind == "poisson":
        proj = clean * mu_max
        if np.any(proj < 0):
            raise InvalidArgumentError("projection has negative entries; Poisson model needs Ax >= 0")
        return _sample_postlog(proj, float(args[0]), mu_max, rng_seed)
    raise InvalidArgumentError(f"unknown noise spec {spec!r}")


def hu_to_mu(x_hu):
    """Hounsfield units to the attenuation scale used for the Poisson simulation."""
    return (20 - 0.02) * np.asarray(x_hu, dtype=np.float64) / 1000 + 20
