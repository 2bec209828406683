"""Acquisition geometries and the projection operators built from them."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..errors import InvalidArgumentError


@dataclass(frozen=True)
class ParallelGeometry:
    """2-d parallel-beam geometry on an ``n_px x n_px`` pixel grid.

    Angles are ``k * pi / num_angles`` for ``k = 0 .. num_angles-1``.
    Detector positions are centred on the rotation axis and spaced
    ``detector_spacing`` pixel widths apart. ``pixel_size`` scales line
    integrals to physical units.
    """

    n_px: int
    num_angles: int
    num_detector_pixels: int
    detector_spacing: float = 1.0
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.n_px < 1 or self.num_angles < 1 or self.num_detector_pixels < 1:
            raise InvalidArgumentError(f"geometry sizes must be positive: {self}")
        if self.detector_spacing <= 0 or self.pixel_size <= 0:
            raise InvalidArgumentError("detector_spacing and pixel_size must be positive")
        span = self.num_detector_pixels * self.detector_spacing
        if span < self.n_px * math.sqrt(2.0) - 1e-9:
            raise InvalidArgumentError(
                f"detector span {span:.2f} px does not cover the image diagonal {self.n_px * math.sqrt(2):.2f} px"
            )

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.num_angles) * (np.pi / self.num_angles)

    @property
    def detector_positions(self) -> np.ndarray:
        """Detector bin centres in pixel units."""
        return (np.arange(self.num_detector_pixels) - (self.num_detector_pixels - 1) / 2.0) * self.detector_spacing

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.num_angles, self.num_detector_pixels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_px, self.n_px)

    def operator(self) -> "MatrixOperator":
        return _joseph_operator(self)


class MatrixOperator:
    """Explicit sparse forward operator ``y = A x``.

    Rows index flattened sinogram bins, columns flattened image pixels.
    Immutable after construction.
    """

    def __init__(
        self,
        matrix,
        image_shape: Optional[tuple] = None,
        sino_shape: Optional[tuple] = None,
        geometry: Optional[ParallelGeometry] = None,
    ):
        m = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.nnz and m.data.min() < 0:
            raise InvalidArgumentError("operator weights must be non-negative")
        rows, cols = m.shape
        if image_shape is None:
            side = math.isqrt(cols)
            image_shape = (side, side) if side * side == cols else (cols,)
        if sino_shape is None:
            sino_shape = (rows,)
        if int(np.prod(image_shape)) != cols or int(np.prod(sino_shape)) != rows:
            raise InvalidArgumentError(
                f"matrix {m.shape} inconsistent with image {image_shape} / sinogram {sino_shape}"
            )
        m.data.setflags(write=False)
        self._matrix = m
        self._matrix_t = m.T.tocsr()
        self.image_shape = tuple(image_shape)
        self.sino_shape = tuple(sino_shape)
        self.geometry = geometry

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self._matrix.shape

    def forward(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.size != self.shape[1]:
            raise InvalidArgumentError(f"image of size {image.size} does not match operator columns {self.shape[1]}")
        return (self._matrix @ image.reshape(-1).astype(np.float64)).reshape(self.sino_shape)

    def adjoint(self, sino: np.ndarray) -> np.ndarray:
        sino = np.asarray(sino)
        if sino.size != self.shape[0]:
            raise InvalidArgumentError(f"sinogram of size {sino.size} does not match operator rows {self.shape[0]}")
        return (self._matrix_t @ sino.reshape(-1).astype(np.float64)).reshape(self.image_shape)


@functools.lru_cache(maxsize=8)
def _joseph_operator(geom: ParallelGeometry) -> MatrixOperator:
    return MatrixOperator(joseph_matrix(geom), geom.image_shape, geom.sino_shape, geometry=geom)


def joseph_matrix(geom: ParallelGeometry) -> sp.csr_matrix:
    """System matrix of Joseph's projector.

    Each ray is sampled once per image row (or column, for rays closer to
    horizontal) with linear interpolation between the two neighbouring
    pixel centres, weighted by the path length per step.
    """
    n = geom.n_px
    centre = (n - 1) / 2.0
    coords = np.arange(n) - centre
    t = geom.detector_positions
    nd = t.size
    rows_all, cols_all, vals_all = [], [], []
    for a, theta in enumerate(geom.angles):
        c, s = math.cos(theta), math.sin(theta)
        ray_ids = a * nd + np.arange(nd)
        if abs(c) >= abs(s):
            # step over rows (y), interpolate along x
            u = (t[:, None] - coords[None, :] * s) / c + centre
            step = geom.pixel_size / abs(c)
            fixed = np.broadcast_to(np.arange(n)[None, :], u.shape)
            along_cols = True
        else:
            u = (t[:, None] - coords[None, :] * c) / s + centre
            step = geom.pixel_size / abs(s)
            fixed = np.broadcast_to(np.arange(n)[None, :], u.shape)
            along_cols = False
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        rid = np.broadcast_to(ray_ids[:, None], u.shape)
        for idx, w in ((i0, 1.0 - frac), (i0 + 1, frac)):
            ok = (idx >= 0) & (idx < n) & (w > 0)
            if along_cols:
                pix = fixed[ok] * n + idx[ok]
            else:
                pix = idx[ok] * n + fixed[ok]
            rows_all.append(rid[ok])
            cols_all.append(pix)
            vals_all.append(w[ok] * step)
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(geom.num_angles * nd, n * n))
    m.sum_duplicates()
    return m
