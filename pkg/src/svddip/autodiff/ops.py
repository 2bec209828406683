"""Differentiable operations on :class:`Tensor`.

Image-like ops take ``[C, H, W]`` or batched ``[B, C, H, W]`` input.
Elementwise binary ops only accept identical shapes or a scalar operand.
"""

from __future__ import annotations

import functools
import numbers
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..errors import InvalidArgumentError
from .tensor import Tensor, as_tensor, make_node

Scalar = Union[int, float]


def _is_scalar(x) -> bool:
    return isinstance(x, numbers.Real) or (isinstance(x, Tensor) and x.ndim == 0)


def _check_same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.shape == g.shape:
        return g
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


# -- elementwise --------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise InvalidArgumentError("add needs at least one tensor operand")
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return make_node(a.data + b, (a,), lambda g: (g,))
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        return make_node(a - b.data, (b,), lambda g: (-g,))
    if not isinstance(b, Tensor):
        return make_node(a.data - b, (a,), lambda g: (g,))
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return make_node(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # np.sign(0) == 0 gives the zero subgradient at the kink.
    sgn = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sgn,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    pos = x > 0
    sl = x.dtype.type(slope)
    out = np.where(pos, x, x * sl)
    return make_node(out, (a,), lambda g: (np.where(pos, g, g * sl),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign to keep exp from overflowing.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return make_node(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g / n, shape),)
    )


# -- structural ---------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _has_advanced_index(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(np.array(out, copy=True), (a,), backward)


def _has_advanced_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (negative axes count from the end)."""
    if not tensors:
        raise InvalidArgumentError("concat of an empty list")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), backward)


def linear_map(
    a: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
) -> Tensor:
    """Apply a fixed linear operator given as a forward/adjoint pair."""
    out = np.asarray(forward(a.data), dtype=a.dtype)
    return make_node(out, (a,), lambda g: (np.asarray(adjoint(g), dtype=a.dtype).reshape(a.shape),))


# -- image ops ----------------------------------------------------------------------


def _as_batched(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise InvalidArgumentError(f"{name}: expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _resolve_padding(padding, k: int) -> int:
    if padding == "same":
        if k % 2 == 0:
            raise InvalidArgumentError(f"'same' padding needs an odd kernel size, got {k}")
        return (k - 1) // 2
    p = int(padding)
    if p < 0:
        raise InvalidArgumentError(f"negative padding {p}")
    return p


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = shape[:2]
    xp = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, k, k, ho, wo)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols[:, :, i, j]
    return xp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Union[int, str] = "same",
) -> Tensor:
    """2-d cross-correlation with symmetric zero padding.

    ``out[n, j1, j2] = sum_{m,k1,k2} w[n, m, k1, k2] * x[m, s*j1 + k1 - p, s*j2 + k2 - p]``
    with out-of-range input samples read as zero.
    """
    xb, squeezed = _as_batched(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise InvalidArgumentError(f"conv2d: weight must be [C_out,C_in,K,K], got {weight.shape}")
    cout, cin, k, _ = weight.shape
    b, c, h, w = xb.shape
    if c != cin:
        raise InvalidArgumentError(f"conv2d: input has {c} channels, weight expects {cin}")
    if h == 0 or w == 0:
        raise InvalidArgumentError("conv2d: zero-size spatial dimension")
    if bias is not None and bias.shape != (cout,):
        raise InvalidArgumentError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise InvalidArgumentError(f"conv2d: stride must be >= 1, got {stride}")
    p = _resolve_padding(padding, k)
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidArgumentError("conv2d: kernel larger than padded input")

    if p:
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=xb.dtype)
        xp[:, :, p : p + h, p : p + w] = xb
    else:
        xp = xb
    if k == 1 and stride == 1:
        cols = xp.reshape(b, c, h * w)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1).astype(xb.dtype, copy=False)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.astype(xb.dtype, copy=False)[:, None]
    out = out.reshape(b, cout, ho, wo)
    if squeezed:
        out = out[0]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gb = g.reshape(b, cout, ho * wo)
        gx = gw = gbias = None
        if x.requires_grad:
            if stride == 1 and p <= k - 1:
                gx = _conv_input_grad(gb.reshape(b, cout, ho, wo), wmat, cin, k, p, h, w)
            else:
                gcols = np.matmul(wmat.T, gb)
                gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
                gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            if squeezed:
                gx = gx[0]
        if weight.requires_grad:
            # (cols g^T)^T is the same product as g cols^T but faster in row-major memory.
            gw = np.matmul(cols, gb.transpose(0, 2, 1)).sum(axis=0).T.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gbias)

    return make_node(out, parents, backward)


def _conv_input_grad(g: np.ndarray, wmat: np.ndarray, cin: int, k: int, p: int, h: int, w: int) -> np.ndarray:
    """Input gradient of a stride-1 conv as a correlation of ``g`` with the flipped, transposed kernel."""
    b, cout, ho, wo = g.shape
    if k == 1 and p == 0:
        return np.matmul(wmat.T, g.reshape(b, cout, ho * wo)).reshape(b, cin, h, w)
    q = k - 1 - p
    wt = wmat.reshape(cout, cin, k, k)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * k * k)
    if q:
        gp = np.zeros((b, cout, ho + 2 * q, wo + 2 * q), dtype=g.dtype)
        gp[:, :, q : q + ho, q : q + wo] = g
    else:
        gp = g
    cols = _im2col(gp, k, 1, h, w)
    return np.matmul(np.ascontiguousarray(wt), cols).reshape(b, cin, h, w)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) interpolation matrix for 2x upsampling with half-pixel centers."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Double both spatial sizes with bilinear interpolation (align-corners off)."""
    xb, squeezed = _as_batched(x, "upsample_bilinear2x")
    h, w = xb.shape[2:]
    if h < 1 or w < 1:
        raise InvalidArgumentError("upsample_bilinear2x: empty spatial dimension")
    mh = _bilinear_matrix(h, np.dtype(xb.dtype))
    mw = _bilinear_matrix(w, np.dtype(xb.dtype))
    out = np.matmul(np.matmul(mh, xb), mw.T)
    if squeezed:
        out = out[0]

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_node(out, (x,), backward)


def group_norm(
    x: Tensor,
    groups: int,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each group of channels to zero mean and unit variance, then apply a per-channel affine map."""
    xb, squeezed = _as_batched(x, "group_norm")
    b, c, h, w = xb.shape
    if groups < 1 or c % groups:
        raise InvalidArgumentError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = xb.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = np.mean(centered * centered, axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(b, c, h, w)
    out = xhat
    if weight is not None:
        out = out * weight.data.astype(xb.dtype, copy=False)[:, None, None]
    if bias is not None:
        out = out + bias.data.astype(xb.dtype, copy=False)[:, None, None]
    out = out.astype(xb.dtype, copy=False)
    if squeezed:
        out = out[0]
    n = xg.shape[2]

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def backward(g):
        gb = g[None] if squeezed else g
        grads = []
        if x.requires_grad:
            gxhat = gb * weight.data[:, None, None] if weight is not None else gb
            gxhat = gxhat.reshape(b, groups, n)
            xh = xhat.reshape(b, groups, n)
            gx = inv_std / n * (
                n * gxhat - gxhat.sum(axis=2, keepdims=True) - xh * (gxhat * xh).sum(axis=2, keepdims=True)
            )
            gx = gx.reshape(b, c, h, w)
            grads.append(gx[0] if squeezed else gx)
        else:
            grads.append(None)
        if weight is not None:
            grads.append((gb * xhat).sum(axis=(0, 2, 3)) if weight.requires_grad else None)
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return make_node(out, tuple(parents), backward)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel ``r`` of ``x`` by ``s[r]``."""
    xb, squeezed = _as_batched(x, "channel_scale")
    if s.shape != (xb.shape[1],):
        raise InvalidArgumentError(f"channel_scale: scale shape {s.shape} vs {xb.shape[1]} channels")
    sd = s.data.astype(xb.dtype, copy=False)[:, None, None]
    out = xb * sd
    if squeezed:
        out = out[0]

    def backward(g):
        gb = g[None] if squeezed else g
        gx = g * sd if x.requires_grad else None
        gs = (gb * xb).sum(axis=(0, 2, 3)) if s.requires_grad else None
        return gx, gs

    return make_node(out, (x, s), backward)
