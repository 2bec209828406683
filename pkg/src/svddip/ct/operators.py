"""Forward projection, filtered back-projection and operator files."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.sparse as sp

from ..errors import InvalidArgumentError
from .geometry import MatrixOperator, ParallelGeometry

MATRIX_MAGIC = "SVDDIPMAT1"


@dataclass
class Sinogram:
    """Projection data plus a description of the noise it carries.

    ``noise`` is ``"none"``, ``"gaussian <rel_level>"`` or ``"poisson <N0>"``.
    """

    data: np.ndarray
    noise: str = "none"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _sino_array(sino) -> np.ndarray:
    return sino.data if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)


def radon_forward(image: np.ndarray, geom: ParallelGeometry) -> Sinogram:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != geom.image_shape:
        raise InvalidArgumentError(f"image shape {image.shape} does not match geometry {geom.image_shape}")
    return Sinogram(geom.operator().forward(image))


def apply_matrix(image: np.ndarray, op: MatrixOperator) -> Sinogram:
    return Sinogram(op.forward(image))


def apply_matrix_T(sino, op: MatrixOperator) -> np.ndarray:
    return op.adjoint(_sino_array(sino))


def save_matrix_operator(path: Union[str, os.PathLike], op: MatrixOperator) -> None:
    coo = op.matrix.tocoo()
    rows, cols = op.shape
    with open(path, "w") as fh:
        fh.write(f"{MATRIX_MAGIC} {rows} {cols} {coo.nnz}\n")
        for r, c, w in zip(coo.row, coo.col, coo.data):
            fh.write(f"{int(r)} {int(c)} {float(w)!r}\n")


def load_matrix_operator(
    path: Union[str, os.PathLike], image_shape=None, sino_shape=None
) -> MatrixOperator:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != MATRIX_MAGIC:
            raise InvalidArgumentError(f"{path}: not a matrix operator file")
        rows, cols, nnz = (int(v) for v in header[1:])
        body = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if body.shape != (nnz, 3):
        raise InvalidArgumentError(f"{path}: expected {nnz} triplets, found {body.shape[0]}")
    r = body[:, 0].astype(np.int64)
    c = body[:, 1].astype(np.int64)
    if nnz and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
        raise InvalidArgumentError(f"{path}: index out of range")
    if len(set(zip(r.tolist(), c.tolist()))) != nnz:
        raise InvalidArgumentError(f"{path}: duplicate (row, col) entries")
    matrix = sp.csr_matrix((body[:, 2], (r, c)), shape=(rows, cols))
    return MatrixOperator(matrix, image_shape, sino_shape)


# -- filtered back-projection ----------------------------------------------------


def ramp_filter(sino: np.ndarray, spacing: float, filter: str = "ramlak") -> np.ndarray:
    """Filter each row of ``sino`` with the band-limited ramp.

    Uses the spatial-domain Ram-Lak kernel sampled at ``spacing``, zero
    padded to avoid wrap-around, so the DC response is exact.
    """
    if filter not in ("ramlak", "hann"):
        raise InvalidArgumentError(f"unknown filter {filter!r}")
    nd = sino.shape[-1]
    size = max(64, int(2 ** np.ceil(np.log2(2 * nd))))
    k = np.fft.fftfreq(size, d=1.0 / size)  # integer offsets, wrapped
    kernel = np.zeros(size)
    kernel[0] = 1.0 / (4.0 * spacing**2)
    odd = (k.astype(np.int64) % 2) == 1
    kernel[odd] = -1.0 / (np.pi**2 * k[odd] ** 2 * spacing**2)
    response = np.real(np.fft.fft(kernel)) * spacing
    if filter == "hann":
        response = response * (0.5 + 0.5 * np.cos(2.0 * np.pi * np.fft.fftfreq(size)))
    padded = np.zeros(sino.shape[:-1] + (size,))
    padded[..., :nd] = sino
    return np.real(np.fft.ifft(np.fft.fft(padded, axis=-1) * response, axis=-1))[..., :nd]


def fbp(sino, geom: ParallelGeometry, filter: str = "ramlak") -> np.ndarray:
    """Filtered back-projection for a parallel-beam sinogram.

    Back-projection samples the filtered projections with linear
    interpolation (zero outside the detector).
    """
    data = _sino_array(sino)
    if geom.num_angles < 2:
        raise InvalidArgumentError("fbp needs at least 2 angles")
    if data.shape != geom.sino_shape:
        raise InvalidArgumentError(f"sinogram shape {data.shape} does not match geometry {geom.sino_shape}")
    filtered = ramp_filter(data, geom.detector_spacing * geom.pixel_size, filter)
    n = geom.n_px
    coords = np.arange(n) - (n - 1) / 2.0
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    det_index = np.arange(geom.num_detector_pixels, dtype=np.float64)
    offset = (geom.num_detector_pixels - 1) / 2.0
    out = np.zeros(n * n)
    for a, theta in enumerate(geom.angles):
        t = (xs * np.cos(theta) + ys * np.sin(theta)).ravel()
        u = t / geom.detector_spacing + offset
        out += np.interp(u, det_index, filtered[a], left=0.0, right=0.0)
    return out.reshape(n, n) * (np.pi / geom.num_angles)


def disk_phantom(n_px: int, radius: float = 0.4, value: float = 1.0, supersample: int = 4) -> np.ndarray:
    """Centred disk with area-weighted edge pixels; ``radius`` is a fraction of the image side."""
    ss = max(int(supersample), 1)
    coords = (np.arange(n_px * ss) + 0.5) / ss - n_px / 2.0
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    inside = (xs**2 + ys**2 <= (radius * n_px) ** 2).astype(np.float64)
    return value * inside.reshape(n_px, ss, n_px, ss).mean(axis=(1, 3))


class FilteredAdjoint:
    """FBP substitute for explicit matrix operators.

    Applies ``A^T`` to ramp-filtered projections and rescales so that a
    centred calibration disk is reconstructed with the correct mean.
    Needs ``op.sino_shape == (num_angles, num_detector_pixels)``.
    """

    def __init__(self, op: MatrixOperator, filter: str = "ramlak"):
        if len(op.sino_shape) != 2 or len(op.image_shape) != 2:
            raise InvalidArgumentError("filtered adjoint needs 2-d sinogram and image shapes")
        self.op = op
        self.filter = filter
        calib = disk_phantom(op.image_shape[0], 0.35) if op.image_shape[0] == op.image_shape[1] else np.ones(op.image_shape)
        rec = self._unscaled(op.forward(calib))
        denom = rec.mean()
        if not np.isfinite(denom) or abs(denom) < 1e-12:
            raise InvalidArgumentError("calibration of the filtered adjoint failed")
        self.scale = calib.mean() / denom

    def _unscaled(self, sino: np.ndarray) -> np.ndarray:
        return self.op.adjoint(ramp_filter(sino, 1.0, self.filter))

    def __call__(self, sino) -> np.ndarray:
        return self.scale * self._unscaled(_sino_array(sino))


def initial_reconstruction(sino, op: MatrixOperator, filter: str = "hann") -> np.ndarray:
    """FBP when ``op`` comes from a parallel geometry, filtered adjoint otherwise."""
    if isinstance(op.geometry, ParallelGeometry):
        return fbp(sino, op.geometry, filter)
    return FilteredAdjoint(op, filter)(sino)
