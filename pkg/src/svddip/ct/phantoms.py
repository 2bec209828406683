"""Random ellipse phantoms."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError


def generate_ellipses(n_px: int, max_ellipses: int = 12, rng_seed: int = 0) -> np.ndarray:
    """Sum of randomly placed, rotated ellipses with signed intensities, clipped to [0, 1].

    The number of ellipses is drawn uniformly from ``[3, max_ellipses]``
    (``max_ellipses`` itself when it is below 3; zero gives an empty image).
    Coordinates are normalised to ``[-1, 1]``; every ellipse centre lies
    inside the inscribed circle so the phantom stays within the field of view.
    """
    if n_px < 16:
        raise InvalidArgumentError(f"n_px must be >= 16, got {n_px}")
    if max_ellipses < 0:
        raise InvalidArgumentError("max_ellipses must be >= 0")
    img = np.zeros((n_px, n_px))
    if max_ellipses == 0:
        return img
    rng = np.random.default_rng(rng_seed)
    count = int(rng.integers(min(3, max_ellipses), max_ellipses + 1))
    coords = (np.arange(n_px) + 0.5) / n_px * 2.0 - 1.0
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    for _ in range(count):
        r = 0.6 * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        cx, cy = r * np.cos(phi), r * np.sin(phi)
        a, b = rng.uniform(0.08, 0.55, size=2)
        angle = rng.uniform(0.0, np.pi)
        value = rng.uniform(-0.4, 1.0)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xs - cx) * ca + (ys - cy) * sa
        v = -(xs - cx) * sa + (ys - cy) * ca
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return np.clip(img, 0.0, 1.0)
