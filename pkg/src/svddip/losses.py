"""Data-fidelity terms, anisotropic TV, the regularised objective and PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops
from .ct.geometry import MatrixOperator
from .ct.noise import DEFAULT_PHOTONS, MU_MAX
from .errors import InvalidArgumentError

DATA_LOSSES = ("squared-l2", "mean-squared", "poisson")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tv_aniso(x) -> Tensor:
    """Sum of absolute forward differences along both axes of a 2-d image (no wrap-around)."""
    x = _t(x)
    if x.ndim != 2:
        raise InvalidArgumentError(f"tv_aniso expects a 2-d image, got shape {x.shape}")
    total = Tensor(np.zeros((), dtype=x.dtype))
    if x.shape[0] > 1:
        total = ops.add(total, ops.sum(ops.abs(ops.sub(x[1:, :], x[:-1, :]))))
    if x.shape[1] > 1:
        total = ops.add(total, ops.sum(ops.abs(ops.sub(x[:, 1:], x[:, :-1]))))
    return total


def _residual(ax, y) -> Tensor:
    ax, y = _t(ax), _t(y)
    if ax.shape != y.shape:
        raise InvalidArgumentError(f"data loss: shape mismatch {ax.shape} vs {y.shape}")
    return ops.sub(ax, y)


def data_loss_l2(ax, y) -> Tensor:
    return ops.sum(ops.square(_residual(ax, y)))


def data_loss_mean(ax, y, n: Optional[int] = None) -> Tensor:
    """``||Ax - y||^2 / n``; ``n`` defaults to the number of measurements."""
    r = _residual(ax, y)
    n = r.size if n is None else n
    if n <= 0:
        raise InvalidArgumentError("n must be positive")
    return ops.scale(ops.sum(ops.square(r)), 1.0 / n)


def poisson_loss(ax, y, n0: float = DEFAULT_PHOTONS, mu_max: float = MU_MAX) -> Tensor:
    """Negative Poisson log-likelihood of post-log data ``y`` given the prediction ``ax``.

    ``-sum_j [N0 exp(-y_j mu)(-(Ax)_j mu + ln N0) - N0 exp(-(Ax)_j mu)]``
    """
    ax, y = _t(ax), _t(y)
    if ax.shape != y.shape:
        raise InvalidArgumentError(f"poisson_loss: shape mismatch {ax.shape} vs {y.shape}")
    observed = (n0 * np.exp(-y.data * mu_max)).astype(ax.dtype)
    log_rate = ops.add(ops.scale(ax, -mu_max), math.log(n0))
    expected = ops.scale(ops.exp(ops.scale(ax, -mu_max)), n0)
    per_bin = ops.sub(ops.mul(log_rate, Tensor(observed)), expected)
    return ops.scale(ops.sum(per_bin), -1.0)


@dataclass
class Objective:
    """``data_term(A x, y) + gamma * TV(x)``."""

    data_loss: str
    gamma: float
    operator: MatrixOperator
    y: np.ndarray
    n0: float = DEFAULT_PHOTONS
    mu_max: float = MU_MAX

    def __post_init__(self):
        if self.data_loss not in DATA_LOSSES:
            raise InvalidArgumentError(f"unknown data loss {self.data_loss!r}; choose from {DATA_LOSSES}")
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise InvalidArgumentError(f"gamma must be finite and >= 0, got {self.gamma}")
        self.y = np.asarray(getattr(self.y, "data", self.y), dtype=np.float64)
        if self.y.shape != self.operator.sino_shape and self.y.size == self.operator.shape[0]:
            self.y = self.y.reshape(self.operator.sino_shape)

    def project(self, x) -> Tensor:
        x = _t(x)
        op = self.operator
        return ops.linear_map(
            ops.reshape(x, op.image_shape),
            lambda a: op.forward(a).astype(a.dtype),
            lambda g: op.adjoint(g),
        )

    def data_term(self, ax: Tensor) -> Tensor:
        y = Tensor(self.y, dtype=ax.dtype)
        if self.data_loss == "squared-l2":
            return data_loss_l2(ax, y)
        if self.data_loss == "mean-squared":
            return data_loss_mean(ax, y)
        return poisson_loss(ax, y, self.n0, self.mu_max)

    def terms(self, x) -> tuple[Tensor, Tensor, Tensor]:
        """``(total, data_term, tv)`` for an image ``x`` of the operator's image shape."""
        x = ops.reshape(_t(x), self.operator.image_shape)
        data = self.data_term(self.project(x))
        tv = tv_aniso(x)
        total = ops.add(data, ops.scale(tv, self.gamma))
        return total, data, tv


def objective_eval(obj: Objective, x) -> Tensor:
    return obj.terms(x)[0]


def psnr(x, x_ref, data_range: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; ``data_range`` defaults to ``max(x_ref)``.

    Returns ``inf`` when the images are identical.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    ref = np.asarray(getattr(x_ref, "data", x_ref), dtype=np.float64)
    if x.shape != ref.shape:
        x = x.reshape(ref.shape) if x.size == ref.size else x
    if x.shape != ref.shape:
        raise InvalidArgumentError(f"psnr: shape mismatch {x.shape} vs {ref.shape}")
    rng_ = float(ref.max()) if data_range is None else float(data_range)
    if rng_ <= 0:
        raise InvalidArgumentError(f"psnr: data_range must be positive, got {rng_}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(rng_**2 / mse)
