"""Finite-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from matformer.errors import NumericError
from matformer.nn.tensor import Tensor, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: list[Tensor],
    eps: float = 1e-4,
    floor: float = 1e-6,
    rows: list[int | None] | None = None,
) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    Every entry of every parameter is perturbed by ``+-eps``. The relative
    error of one entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is (near) zero from dividing by roundoff.

    Args:
        f: Builds the graph and returns a scalar loss. Must be deterministic.
        params: Leaf tensors to check; their ``data`` must be contiguous.
        eps: Perturbation size.
        floor: Lower bound on the error denominator.
        rows: Optional per-parameter count of leading rows to perturb
            (``None`` means all). Later rows are declared inert: their
            numerical derivative is taken as zero, so any nonzero analytic
            gradient there counts as a full error.

    Returns:
        The worst relative error, 0.0 when ``params`` is empty.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not params:
        return 0.0
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value() -> float:
        with no_grad():
            out = f().item()
        if not np.isfinite(out):
            raise NumericError("non-finite loss during finite differencing")
        return out

    if rows is None:
        rows = [None] * len(params)
    if len(rows) != len(params):
        raise ValueError("rows needs one entry per parameter")
    worst = 0.0
    for p, a, n_rows in zip(params, analytic, rows):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("parameter data must be contiguous")
        a = a.reshape(-1)
        active = flat.size if n_rows is None else int(n_rows) * (flat.size // max(p.shape[0], 1))
        inert = a[active:]
        if inert.size and np.any(inert != 0):
            worst = max(worst, 1.0)
        for i in range(active):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(a[i] - numeric) / max(abs(a[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst
