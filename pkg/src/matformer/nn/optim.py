"""Adam with global-norm clipping and a warmup / inverse-sqrt schedule."""

from __future__ import annotations

import math

import numpy as np

from matformer.nn.tensor import Tensor


def warmup_inverse_sqrt(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then ``peak * sqrt(warmup / step)``.

    ``step`` is 1-based.
    """
    step = max(step, 1)
    if warmup <= 0:
        return peak / math.sqrt(step)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-9,
) -> None:
    """One in-place Adam update of ``param`` and its moments ``m``, ``v``."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    step_size = lr * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    param -= step_size * m / (np.sqrt(v) + eps)


class Adam:
    """Adam over a list of parameters.

    Only the row prefix a parameter's gradient actually touched this step
    (``Tensor.grad_rows``) is updated, so slices that received no gradient
    keep both their weights and their moment estimates bit-for-bit.
    """

    def __init__(
        self,
        params: list[Tensor],
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-9,
        clip_norm: float | None = 1.0,
    ):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                g = p.grad[: p.grad_rows]
                total += float(np.vdot(g, g))
        return math.sqrt(total)

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        self.t += 1
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or p.grad_rows == 0:
                continue
            rows = p.grad_rows
            g = p.grad[:rows] * factor if factor != 1.0 else p.grad[:rows]
            adam_step(p.data[:rows], g, m[:rows], v[:rows], self.t, lr, self.betas, self.eps)
        return norm
