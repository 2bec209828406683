"""SVD factorisation of convolution weights.

A weight ``W`` of shape ``[C_out, C_in, K, K]`` is folded into the matrix
``W' = W.reshape(C_out, C_in*K*K)`` (columns ordered input channel first,
then kernel row, then kernel column). Writing ``W' = U diag(s) V`` and
unfolding ``V`` back into ``[R, C_in, K, K]`` and ``U`` into
``[C_out, R, 1, 1]`` gives three layers whose composition

    conv(U, s * conv(V, X))

equals ``conv(W, X)`` for every input ``X``. Only ``s`` is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError

MAX_SWEEPS = 60
ROTATION_TOL = 1e-12


@dataclass(frozen=True)
class FoldedMatrix:
    """``C_out x (C_in*K*K)`` matrix plus what is needed to unfold it again.

    ``column_order`` is the index bijection as a permutation of the default
    lexicographic (channel, k1, k2) ordering; ``None`` means identity.
    """

    matrix: np.ndarray
    in_channels: int
    kernel_size: int
    column_order: Optional[np.ndarray] = None


def fold(weight: np.ndarray, column_order: Optional[np.ndarray] = None) -> FoldedMatrix:
    w = np.asarray(weight)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise InvalidArgumentError(f"fold expects [C_out, C_in, K, K], got {w.shape}")
    cout, cin, k, _ = w.shape
    mat = w.reshape(cout, cin * k * k)
    if column_order is not None:
        column_order = np.asarray(column_order)
        if sorted(column_order.tolist()) != list(range(cin * k * k)):
            raise InvalidArgumentError("column_order must be a permutation of the folded columns")
        mat = mat[:, column_order]
    return FoldedMatrix(np.array(mat, copy=True), cin, k, column_order)


def _restore_columns(mat: np.ndarray, column_order: Optional[np.ndarray]) -> np.ndarray:
    if column_order is None:
        return mat
    out = np.empty_like(mat)
    out[:, column_order] = mat
    return out


def unfold_V(b: np.ndarray, in_channels: int, kernel_size: int, column_order=None) -> np.ndarray:
    """Right factor ``R x (C_in*K*K)`` to a ``[R, C_in, K, K]`` kernel."""
    b = np.asarray(b)
    if b.ndim != 2 or b.shape[1] != in_channels * kernel_size**2:
        raise InvalidArgumentError(
            f"cannot unfold {b.shape} into [R, {in_channels}, {kernel_size}, {kernel_size}]"
        )
    return _restore_columns(b, column_order).reshape(b.shape[0], in_channels, kernel_size, kernel_size)


def unfold_U(a: np.ndarray) -> np.ndarray:
    """Left factor ``C_out x R`` to a ``[C_out, R, 1, 1]`` kernel (indices untouched)."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise InvalidArgumentError(f"unfold_U expects a matrix, got shape {a.shape}")
    return a.reshape(a.shape[0], a.shape[1], 1, 1)


def unfold(folded: FoldedMatrix) -> np.ndarray:
    return unfold_V(folded.matrix, folded.in_channels, folded.kernel_size, folded.column_order)


# -- one-sided Jacobi ----------------------------------------------------------------


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=np.int64), np.array(right, dtype=np.int64)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(g: np.ndarray, max_sweeps: int, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of ``g`` by plane rotations.

    Returns ``(B, J)`` with ``g @ J == B``, ``J`` orthogonal and the columns
    of ``B`` mutually orthogonal.
    """
    b = np.array(g, dtype=np.float64, copy=True)
    q = b.shape[1]
    j = np.eye(q)
    if q < 2:
        return b, j
    rounds = _round_robin(q)
    for _ in range(max_sweeps):
        worst = 0.0
        for left, right in rounds:
            bl, br = b[:, left], b[:, right]
            alpha = np.einsum("ij,ij->j", bl, bl)
            beta = np.einsum("ij,ij->j", br, br)
            gamma = np.einsum("ij,ij->j", bl, br)
            norm = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(norm > 0, np.abs(gamma) / norm, 0.0)
            worst = max(worst, float(off.max()))
            rot = off > tol
            if not rot.any():
                continue
            left, right = left[rot], right[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            bl, br = b[:, left], b[:, right]
            b[:, left] = c * bl - s * br
            b[:, right] = s * bl + c * br
            jl, jr = j[:, left], j[:, right]
            j[:, left] = c * jl - s * jr
            j[:, right] = s * jl + c * jr
        if worst <= tol:
            return b, j
    raise NumericalFailureError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def _orthonormal_columns(b: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Normalise columns; columns of (numerically) zero norm are replaced by an orthonormal completion."""
    p = b.shape[0]
    scale = norms.max() if norms.size else 0.0
    good = norms > max(p, b.shape[1]) * np.finfo(np.float64).eps * scale if scale > 0 else np.zeros_like(norms, bool)
    u = np.zeros_like(b)
    u[:, good] = b[:, good] / norms[good]
    bad = np.flatnonzero(~good)
    if bad.size:
        basis = np.hstack([u[:, good], np.eye(p)])
        q, _ = np.linalg.qr(basis)
        k = int(good.sum())
        u[:, bad] = q[:, k : k + bad.size]
    return u


@dataclass
class SvdFactors:
    """Thin SVD ``W' = U diag(s) V`` of a folded conv weight.

    ``U`` is ``C_out x R``, ``V`` is ``R x (C_in*K*K)``; ``s`` is
    descending. After truncation ``R`` counts only the active values and
    ``full_rank`` remembers the original size.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    in_channels: int
    kernel_size: int
    column_order: Optional[np.ndarray] = None
    full_rank: int = field(default=-1)

    def __post_init__(self):
        if self.full_rank < 0:
            self.full_rank = self.s.size

    @property
    def rank(self) -> int:
        return int(self.s.size)

    def matrix(self) -> np.ndarray:
        return (self.U * self.s) @ self.V


def svd_decompose(
    folded: Union[FoldedMatrix, np.ndarray],
    max_sweeps: int = MAX_SWEEPS,
    tol: float = ROTATION_TOL,
) -> SvdFactors:
    """Thin SVD by one-sided Jacobi, singular values descending.

    Sign convention: the largest-magnitude entry of each left singular
    vector is positive.
    """
    if isinstance(folded, FoldedMatrix):
        w, cin, k, order = folded.matrix, folded.in_channels, folded.kernel_size, folded.column_order
    else:
        w = np.asarray(folded)
        if w.ndim != 2:
            raise InvalidArgumentError(f"svd_decompose expects a matrix, got shape {w.shape}")
        cin, k, order = w.shape[1], 1, None
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("matrix has non-finite entries")
    m, n = w.shape
    if m <= n:
        # Orthogonalise the m columns of W'^T: W'^T J = B  =>  W' = J diag(s) (B/s)^T
        b, j = _jacobi_columns(w.T, max_sweeps, tol)
        s = np.linalg.norm(b, axis=0)
        v = _orthonormal_columns(b, s).T
        u = j
    else:
        b, j = _jacobi_columns(w, max_sweeps, tol)
        s = np.linalg.norm(b, axis=0)
        u = _orthonormal_columns(b, s)
        v = j.T
    order_idx = np.argsort(-s, kind="stable")
    u, s, v = u[:, order_idx], s[order_idx], v[order_idx, :]
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs[:, None]
    return SvdFactors(u, s, v, cin, k, order)


def factorize_conv(weight: np.ndarray, **svd_kwargs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a conv kernel into ``(U_kernel [C_out,R,1,1], s [R], V_kernel [R,C_in,K,K])``."""
    w = np.asarray(weight)
    if w.ndim != 4 or w.shape[2] % 2 == 0:
        raise InvalidArgumentError(f"factorize_conv expects [C_out, C_in, K, K] with odd K, got {w.shape}")
    factors = svd_decompose(fold(w), **svd_kwargs)
    return factor_kernels(factors)


def factor_kernels(factors: SvdFactors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        unfold_U(factors.U),
        factors.s.copy(),
        unfold_V(factors.V, factors.in_channels, factors.kernel_size, factors.column_order),
    )


# -- truncation ----------------------------------------------------------------------


@dataclass(frozen=True)
class TruncationPolicy:
    """``none``, ``rank_fraction`` (keep the top ``value`` share) or
    ``threshold_fraction`` (drop values below ``value * s_max``)."""

    kind: str = "none"
    value: float = 0.0

    def __post_init__(self):
        if self.kind == "rank_fraction":
            if not 0.0 < self.value <= 1.0:
                raise InvalidArgumentError(f"rank fraction must lie in (0, 1], got {self.value}")
        elif self.kind == "threshold_fraction":
            if not 0.0 <= self.value < 1.0:
                raise InvalidArgumentError(f"threshold fraction must lie in [0, 1), got {self.value}")
        elif self.kind != "none":
            raise InvalidArgumentError(f"unknown truncation policy {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "TruncationPolicy":
        """``"none"``, ``"rank 0.5"`` or ``"threshold 0.1"``."""
        parts = text.split()
        if not parts or parts[0] == "none":
            return cls()
        aliases = {"rank": "rank_fraction", "rank_fraction": "rank_fraction",
                   "threshold": "threshold_fraction", "threshold_fraction": "threshold_fraction"}
        if parts[0] not in aliases or len(parts) != 2:
            raise InvalidArgumentError(f"cannot parse truncation policy {text!r}")
        return cls(aliases[parts[0]], float(parts[1]))

    def __str__(self) -> str:
        if self.kind == "none":
            return "none"
        return f"{'rank' if self.kind == 'rank_fraction' else 'threshold'} {self.value:g}"

    def keep_mask(self, s: np.ndarray) -> np.ndarray:
        r = s.size
        if self.kind == "none":
            return np.ones(r, dtype=bool)
        if self.kind == "rank_fraction":
            keep = max(1, math.ceil(self.value * r - 1e-9))
            mask = np.zeros(r, dtype=bool)
            mask[:keep] = True
            return mask
        return s >= self.value * (s[0] if r else 0.0)


def apply_truncation(factors: SvdFactors, policy: TruncationPolicy) -> SvdFactors:
    mask = policy.keep_mask(factors.s)
    if not mask.any():
        raise InvalidArgumentError(f"truncation policy {policy} removes every singular value")
    if mask.all():
        return factors
    return replace(
        factors,
        U=factors.U[:, mask].copy(),
        s=factors.s[mask].copy(),
        V=factors.V[mask, :].copy(),
        full_rank=factors.full_rank,
    )


def count_trainable(obj) -> int:
    """Trainable parameter count: every weight entry of a raw kernel, the active rank of factors."""
    if isinstance(obj, SvdFactors):
        return obj.rank
    return int(np.asarray(obj).size)
