"""Adam with bias correction; state lives on each :class:`Parameter`."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update of every trainable parameter, using its current ``grad``.

    Non-trainable parameters are skipped entirely (value and moments untouched).
    """
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.exp_avg *= beta1
        p.exp_avg += (1.0 - beta1) * g
        p.exp_avg_sq *= beta2
        p.exp_avg_sq += (1.0 - beta2) * (g * g)
        m_hat = p.exp_avg / (1.0 - beta1**t)
        v_hat = p.exp_avg_sq / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


class Adam:
    """Holds hyperparameters for repeated :func:`adam_step` calls."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas[0], self.betas[1], self.eps)
