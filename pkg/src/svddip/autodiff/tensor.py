"""Tensor values, trainable parameters and the recording tape.

Operations only build a graph while a :class:`Tape` is active::

    with Tape() as tape:
        loss = ops.sum(ops.mul(w, x))
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what
evaluation passes use.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import InvalidArgumentError

_FLOAT_TYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense float32/float64 array plus the bookkeeping needed for backprop.

    Parameters
    ----------
    data : array_like
        Values. Integer input is promoted to float64.
    requires_grad : bool
        Leaf tensors with ``requires_grad`` collect ``.grad`` on backward.
    dtype : numpy dtype, optional
        Force a precision (``np.float32`` or ``np.float64``).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        if self.data.dtype.type not in _FLOAT_TYPES:
            raise InvalidArgumentError(f"unsupported dtype {self.data.dtype}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype.name})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)


class Parameter(Tensor):
    """A trainable tensor with a gradient buffer and Adam state.

    ``grad`` always has the shape of ``data``. When ``trainable`` is false
    the optimizer leaves ``data`` untouched; gradients may still be
    accumulated unless ``requires_grad`` is switched off as well.
    """

    def __init__(self, data, trainable: bool = True, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.data = np.array(self.data, copy=True)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def reset_optimizer_state(self) -> None:
        self.exp_avg.fill(0.0)
        self.exp_avg_sq.fill(0.0)
        self.step_count = 0

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise InvalidArgumentError(f"cannot assign shape {value.shape} to parameter of shape {self.data.shape}")
        self.data[...] = value

    def astype(self, dtype) -> None:
        """Convert value, gradient and optimizer buffers in place."""
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.exp_avg = self.exp_avg.astype(dtype)
        self.exp_avg_sq = self.exp_avg_sq.astype(dtype)


_TAPE_STACK: list = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of
    the graph; :meth:`backward` walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every leaf that requires a gradient.

        Leaf gradients are accumulated (added) into ``leaf.grad``.
        """
        if loss.data.size != 1:
            raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise InvalidArgumentError("backward called on an empty tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf:
            _accumulate_leaf(loss, pending[id(loss)])
            return
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg

    def clear(self) -> None:
        self.nodes.clear()


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording it on the active tape when any input needs a gradient."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)
