"""Fitting ``Loss(N, D) = a * (N * D) ** b + c`` to sweeps of trained models.

``N`` is the non-embedding parameter count and ``D`` the number of training
tokens. The fit is a multi-start Levenberg-Marquardt on the analytic Jacobian.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from matformer.errors import FitError

logger = logging.getLogger(__name__)

B_STARTS = (-0.05, -0.1, -0.2, -0.4)


@dataclass(frozen=True)
class ScalingPoint:
    N: float
    D: float
    loss: float

    def __post_init__(self):
        if not (self.N > 0 and self.D > 0 and self.loss > 0):
            raise ValueError(f"scaling point needs positive N, D and loss, got {self}")


@dataclass(frozen=True)
class ScalingFit:
    a: float
    b: float
    c: float
    rmse: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


# Published fits for the 850M-scale sweeps. The units of N and D behind them
# are not stated, so they are kept for reference and never evaluated against
# toy sweeps.
REFERENCE_FITS = {
    "baseline": ScalingFit(14.08, -0.10, 0.89),
    "matformer": ScalingFit(21.60, -0.13, 1.33),
}


def eval_scaling(fit: ScalingFit, N, D):
    """``a * (N * D) ** b + c``; vectorizes over ``N`` and ``D``."""
    x = np.asarray(N, dtype=np.float64) * np.asarray(D, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("N and D must be positive")
    out = fit.a * x**fit.b + fit.c
    return float(out) if np.ndim(out) == 0 else out


def _residuals(theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, b, c = theta
    return a * np.power(x, b) + c - y


def _jacobian(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    a, b, _ = theta
    xb = np.power(x, b)
    return np.column_stack([xb, a * xb * np.log(x), np.ones_like(x)])


def _linear_ac(b: float, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares ``a`` and ``c`` for a fixed exponent."""
    design = np.column_stack([np.power(x, b), np.ones_like(x)])
    (a, c), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(a), float(c)


def _levenberg_marquardt(
    theta: np.ndarray, x: np.ndarray, y: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, float, bool]:
    """Damped Gauss-Newton with Marquardt scaling; only improving steps are taken."""
    r = _residuals(theta, x, y)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(max_iter):
        jac = _jacobian(theta, x)
        jtj = jac.T @ jac
        grad = jac.T @ r
        if np.max(np.abs(grad)) <= tol * max(1.0, cost):
            return theta, cost, True
        improved = False
        while lam < 1e16:
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-300))
            try:
                step = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = theta + step
            with np.errstate(over="ignore", invalid="ignore"):
                # overflowing trials are simply rejected
                r_trial = _residuals(trial, x, y)
                cost_trial = float(r_trial @ r_trial)
            if np.isfinite(cost_trial) and cost_trial < cost:
                small = np.max(np.abs(step) / (np.abs(theta) + 1e-12)) < tol
                theta, r, old, cost = trial, r_trial, cost, cost_trial
                lam = max(lam / 10, 1e-15)
                improved = True
                if small or old - cost <= tol * tol * max(old, 1e-300):
                    return theta, cost, True
                break
            lam *= 10
        if not improved:
            # no descent direction left at any damping: a stationary point
            return theta, cost, True
    return theta, cost, False


def fit_power_law(points: Sequence[ScalingPoint], max_iter: int = 500, tol: float = 1e-12) -> ScalingFit:
    """Best-RMSE fit over exponent starts :data:`B_STARTS`.

    Each start fixes ``b``, solves ``a`` and ``c`` by linear least squares,
    then refines all three jointly. Because only improving steps are taken
    and the constant model is always a candidate, the result is never worse
    than predicting the mean loss.

    Raises:
        FitError: With fewer than four distinct ``N * D`` values, or if no
            start yields a finite fit.
    """
    x = np.array([p.N * p.D for p in points], dtype=np.float64)
    y = np.array([p.loss for p in points], dtype=np.float64)
    if np.unique(x).size < 4:
        raise FitError(f"need at least 4 points with distinct N*D, got {np.unique(x).size}")
    # work in units of the geometric mean so that x ** b stays well scaled
    scale = math.exp(float(np.mean(np.log(x))))
    xs = x / scale
    candidates = [(float(np.sum((y - y.mean()) ** 2)), np.array([0.0, 0.0, y.mean()]), "constant")]
    diagnostics = []
    for b0 in B_STARTS:
        a0, c0 = _linear_ac(b0, xs, y)
        theta, cost, converged = _levenberg_marquardt(np.array([a0, b0, c0]), xs, y, max_iter, tol)
        diagnostics.append(f"b0={b0}: cost={cost:.3g} converged={converged}")
        if np.isfinite(cost) and np.isfinite(theta).all():
            candidates.append((cost, theta, f"b0={b0}"))
    finite = [cand for cand in candidates if cand[2] != "constant"]
    if not finite:
        raise FitError("no start produced a finite fit: " + "; ".join(diagnostics))
    cost, theta, origin = min(candidates, key=lambda cand: cand[0])
    logger.debug("scaling fit picked %s (%s)", origin, "; ".join(diagnostics))
    a_s, b, c = (float(v) for v in theta)
    # undo the x scaling: a_s * (x / scale) ** b == (a_s * scale ** -b) * x ** b
    a = a_s * scale ** (-b)
    return ScalingFit(a, b, c, math.sqrt(cost / y.size))


def constant_rmse(points: Sequence[ScalingPoint]) -> float:
    y = np.array([p.loss for p in points])
    return float(np.sqrt(np.mean((y - y.mean()) ** 2)))


def read_points_csv(path) -> list[ScalingPoint]:
    """Read a CSV with header ``N,D,loss``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"N", "D", "loss"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header N,D,loss")
        return [ScalingPoint(float(r["N"]), float(r["D"]), float(r["loss"])) for r in reader]


def write_points_csv(path, points: Sequence[ScalingPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "D", "loss"])
        for p in points:
            writer.writerow([repr(float(p.N)), repr(float(p.D)), repr(float(p.loss))])


def write_fit_json(path, fit: ScalingFit) -> None:
    Path(path).write_text(json.dumps(fit.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
