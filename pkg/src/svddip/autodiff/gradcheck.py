"""Central finite-difference gradient checking.

The numerical side only ever evaluates ``fn`` forward (no tape), so it is an
independent oracle for :meth:`Tape.backward`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad_entry(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int, index, h: float) -> float:
    x = inputs[which].data
    orig = x[index]
    x[index] = orig + h
    f_plus = float(fn(*inputs).data)
    x[index] = orig - h
    f_minus = float(fn(*inputs).data)
    x[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def max_relative_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    probes: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative mismatch between backprop and central differences.

    ``probes`` coordinates are drawn per input (all of them when the input is
    smaller). The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is 1e-3 of the largest probed magnitude, so that
    components that are zero up to roundoff do not dominate.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64)) for t in inputs]
    rng = np.random.default_rng(seed)
    grads = analytic_grads(fn, inputs)
    pairs = []
    for which, t in enumerate(inputs):
        n = t.size
        flat = np.arange(n) if n <= probes else rng.choice(n, size=probes, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), t.shape)
            num = numerical_grad_entry(fn, inputs, which, idx, h)
            pairs.append((float(grads[which][idx]), num))
    a = np.array([p[0] for p in pairs])
    n = np.array([p[1] for p in pairs])
    floor = max(1e-3 * float(np.max(np.abs(n))) if n.size else 0.0, 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
