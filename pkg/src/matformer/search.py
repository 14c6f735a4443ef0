"""Budget-constrained Mix'n'Match selection.

Three ways to pick a per-layer granularity config under a budget:

* :func:`heuristic_select`, the least-slope rule: among non-decreasing configs
  built from two adjacent granularities ``[i]*k + [i+1]*(l-k)``, take the one
  that uses the most budget.
* :func:`evolutionary_search` over a learned loss predictor (ridge regression
  fitted by :func:`fit_predictor`).
* :func:`exhaustive_search` for instances small enough to enumerate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from matformer.accounting import flops_per_token, param_count
from matformer.config import LayerConfig, ModelConfig, count_configs, enumerate_configs
from matformer.errors import BudgetError, ConfigError

logger = logging.getLogger(__name__)

BUDGET_METRICS = ("params", "flops_per_token", "ffn_width")
FAMILIES = ("increasing", "decreasing", "increasing-decreasing", "decreasing-increasing")
EXHAUSTIVE_LIMIT = 65536


@dataclass(frozen=True)
class Budget:
    """An upper bound on one cost metric of a submodel.

    ``params`` counts non-embedding parameters, ``flops_per_token`` is the
    inference FLOP count, and ``ffn_width`` is the sum of per-layer FFN widths.
    """

    metric: str
    limit: int

    def __post_init__(self):
        if self.metric not in BUDGET_METRICS:
            raise ConfigError(f"unknown budget metric {self.metric!r}; expected one of {BUDGET_METRICS}")

    def cost(self, cfg: ModelConfig, config) -> int:
        config = LayerConfig.coerce(config)
        if self.metric == "params":
            return param_count(cfg, config)
        if self.metric == "flops_per_token":
            return flops_per_token(cfg, config)
        return sum(cfg.granularity.width(i) for i in config)

    def allows(self, cfg: ModelConfig, config) -> bool:
        return self.cost(cfg, config) <= self.limit

    def to_dict(self) -> dict:
        return {"metric": self.metric, "limit": int(self.limit)}


def least_slope_chain(n_layers: int, g: int) -> list[LayerConfig]:
    """Every config ``[i]*k + [i+1]*(l-k)``, ordered by strictly increasing cost.

    Larger granularities sit in the deeper layers.
    """
    chain = [LayerConfig.uniform(1, n_layers)]
    for i in range(1, g):
        for k in range(n_layers - 1, -1, -1):
            chain.append(LayerConfig((i,) * k + (i + 1,) * (n_layers - k)))
    return chain


def heuristic_select(budget: Budget, cfg: ModelConfig) -> LayerConfig:
    """Largest least-slope config that fits ``budget``.

    Raises:
        BudgetError: If even the all-smallest config is over budget.
    """
    best = None
    for config in least_slope_chain(cfg.n_layers, cfg.g):
        if budget.allows(cfg, config):
            best = config
        else:
            # chain costs are increasing, nothing later fits either
            break
    if best is None:
        smallest = budget.cost(cfg, LayerConfig.uniform(1, cfg.n_layers))
        raise BudgetError(f"{budget.metric} budget {budget.limit} is below the smallest submodel ({smallest})")
    return best


# -- shape families ---------------------------------------------------------


def is_increasing(c: Sequence[int]) -> bool:
    return all(a <= b for a, b in zip(c, c[1:]))


def is_decreasing(c: Sequence[int]) -> bool:
    return all(a >= b for a, b in zip(c, c[1:]))


def is_increasing_decreasing(c: Sequence[int]) -> bool:
    peak = int(np.argmax(c))
    return is_increasing(c[: peak + 1]) and is_decreasing(c[peak:])


def is_decreasing_increasing(c: Sequence[int]) -> bool:
    valley = int(np.argmin(c))
    return is_decreasing(c[: valley + 1]) and is_increasing(c[valley:])


FAMILY_PREDICATES: dict[str, Callable[[Sequence[int]], bool]] = {
    "increasing": is_increasing,
    "decreasing": is_decreasing,
    "increasing-decreasing": is_increasing_decreasing,
    "decreasing-increasing": is_decreasing_increasing,
}


def _walk(n_layers: int, g: int, first_up: bool) -> Iterator[tuple[int, ...]]:
    """Sequences that move in one direction and may turn around once.

    ``first_up`` starts in the rising phase (unimodal shapes); otherwise the
    walk starts falling (valley shapes). The phase only flips on a strict
    move against it, so each sequence is produced exactly once.
    """

    def rec(prefix: tuple[int, ...], rising: bool, turned: bool):
        if len(prefix) == n_layers:
            yield prefix
            return
        last = prefix[-1]
        for v in range(1, g + 1):
            going_up = v > last
            going_down = v < last
            if rising and going_down:
                if turned:
                    continue
                yield from rec(prefix + (v,), False, True)
            elif not rising and going_up:
                if turned:
                    continue
                yield from rec(prefix + (v,), True, True)
            else:
                yield from rec(prefix + (v,), rising, turned)

    for v in range(1, g + 1):
        yield from rec((v,), first_up, False)


def enumerate_balanced(n_layers: int, g: int, family: str) -> Iterator[LayerConfig]:
    """Configs of one shape family, in lexicographic order."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if family == "increasing":
        seqs = _nondecreasing(n_layers, g)
    elif family == "decreasing":
        seqs = sorted(tuple(reversed(s)) for s in _nondecreasing(n_layers, g))
    elif family == "increasing-decreasing":
        seqs = sorted(_walk(n_layers, g, True))
    else:
        seqs = sorted(_walk(n_layers, g, False))
    for s in seqs:
        yield LayerConfig(s)


def _nondecreasing(n_layers: int, g: int) -> Iterator[tuple[int, ...]]:
    def rec(prefix: tuple[int, ...], low: int):
        if len(prefix) == n_layers:
            yield prefix
            return
        for v in range(low, g + 1):
            yield from rec(prefix + (v,), v)

    yield from rec((), 1)


def balanced_families(n_layers: int, g: int) -> dict[str, list[LayerConfig]]:
    return {family: list(enumerate_balanced(n_layers, g, family)) for family in FAMILIES}


# -- loss predictor -----------------------------------------------------------


def config_features(cfg: ModelConfig, configs: Iterable) -> np.ndarray:
    """Per-layer one-hot granularity plus non-embedding params relative to the full model."""
    configs = [LayerConfig.coerce(c) for c in configs]
    full = param_count(cfg, cfg.max_config())
    x = np.zeros((len(configs), cfg.n_layers * cfg.g + 1))
    for row, config in enumerate(configs):
        for j, gran in enumerate(config):
            x[row, j * cfg.g + gran - 1] = 1.0
        x[row, -1] = param_count(cfg, config) / full
    return x


@dataclass
class PredictorDataset:
    """Deduplicated (config, measured loss) pairs."""

    configs: list[LayerConfig]
    losses: np.ndarray

    def __post_init__(self):
        seen: dict[LayerConfig, float] = {}
        for c, loss in zip(self.configs, np.asarray(self.losses, dtype=np.float64)):
            if not np.isfinite(loss):
                raise ValueError(f"non-finite loss for config {c}")
            seen.setdefault(LayerConfig.coerce(c), float(loss))
        self.configs = list(seen)
        self.losses = np.array(list(seen.values()))

    def __len__(self) -> int:
        return len(self.configs)


@dataclass
class LossPredictor:
    """Ridge regression from :func:`config_features` to validation loss.

    Attributes:
        weights: One weight per feature, then the intercept.
        lam: Ridge strength actually used.
        heldout_mse: Mean squared error on the held-out part of the split.
        variance_baseline: MSE of predicting the training mean on the held-out part.
    """

    model_config: ModelConfig
    weights: np.ndarray
    lam: float
    heldout_mse: float = float("nan")
    variance_baseline: float = float("nan")
    n_train: int = 0
    n_eval: int = 0

    def predict(self, configs: Iterable) -> np.ndarray:
        x = config_features(self.model_config, configs)
        return x @ self.weights[:-1] + self.weights[-1]

    def __call__(self, config) -> float:
        return float(self.predict([config])[0])


def _ridge(x: np.ndarray, y: np.ndarray, lam: float, max_tries: int = 12) -> tuple[np.ndarray, float]:
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    for _ in range(max_tries):
        a = xa.T @ xa + lam * np.eye(xa.shape[1])
        try:
            w = np.linalg.solve(a, xa.T @ y)
        except np.linalg.LinAlgError:
            w = None
        if w is not None and np.isfinite(w).all() and np.linalg.cond(a) < 1e13:
            return w, lam
        lam = lam * 10 if lam > 0 else 1e-12
    raise BudgetError("ridge system stayed singular after regularization fallback")


def fit_predictor(
    data: PredictorDataset,
    model_config: ModelConfig,
    lam: float = 1e-6,
    train_fraction: float = 0.6,
    seed: int = 0,
    min_pairs: int = 32,
) -> LossPredictor:
    """Fit ridge regression on a seeded ``train_fraction`` split and score the rest.

    The returned predictor is refit on all pairs after the held-out MSE has
    been measured.
    """
    n = len(data)
    if n < min_pairs:
        raise ValueError(f"fit_predictor needs at least {min_pairs} pairs, got {n}")
    x = config_features(model_config, data.configs)
    y = data.losses
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    tr, ev = order[:n_train], order[n_train:]
    w, used = _ridge(x[tr], y[tr], lam)
    pred = x[ev] @ w[:-1] + w[-1]
    mse = float(np.mean((pred - y[ev]) ** 2)) if ev.size else float("nan")
    baseline = float(np.mean((y[ev] - y[tr].mean()) ** 2)) if ev.size else float("nan")
    w_all, used = _ridge(x, y, used)
    logger.info("predictor held-out MSE %.3g (variance baseline %.3g, lambda %.1g)", mse, baseline, used)
    return LossPredictor(model_config, w_all, used, mse, baseline, tr.size, ev.size)


# -- search ---------------------------------------------------------------------


def _score_key(score: float, config: LayerConfig) -> tuple:
    return (score, tuple(config))


def exhaustive_search(score: Callable[[LayerConfig], float], budget: Budget, cfg: ModelConfig) -> LayerConfig:
    """Feasible config with the lowest score (ties broken lexicographically)."""
    total = count_configs(cfg.n_layers, cfg.g)
    if total > EXHAUSTIVE_LIMIT:
        raise BudgetError(f"exhaustive search over {total} configs exceeds the limit of {EXHAUSTIVE_LIMIT}")
    best = None
    for config in enumerate_configs(cfg.n_layers, cfg.g):
        if budget.allows(cfg, config):
            key = _score_key(score(config), config)
            if best is None or key < best[0]:
                best = (key, config)
    if best is None:
        raise BudgetError("no config fits the budget")
    return best[1]


def evolutionary_search(
    predictor,
    budget: Budget,
    cfg: ModelConfig,
    iters: int = 50,
    seed: int = 0,
    population: int = 64,
    mutation_rate: float = 0.5,
) -> LayerConfig:
    """Population search minimizing predicted loss under a budget.

    Children come from per-layer uniform crossover of two tournament-selected
    parents, followed (with probability ``mutation_rate``) by resampling one
    layer's granularity. Over-budget children are rejected. The population
    keeps the ``population`` best distinct configs seen.

    Args:
        predictor: Object with ``predict(configs) -> array`` or a callable
            mapping one config to a score.

    Raises:
        BudgetError: If no feasible individual could be found at init.
    """
    rng = np.random.default_rng(seed)
    l, g = cfg.n_layers, cfg.g
    cache: dict[LayerConfig, float] = {}

    def scores(configs: list[LayerConfig]) -> None:
        todo = [c for c in configs if c not in cache]
        if not todo:
            return
        if hasattr(predictor, "predict"):
            values = np.asarray(predictor.predict(todo), dtype=np.float64)
        else:
            values = np.array([float(predictor(c)) for c in todo])
        cache.update(zip(todo, values))

    pool: list[LayerConfig] = []
    smallest = LayerConfig.uniform(1, l)
    if budget.allows(cfg, smallest):
        pool.append(smallest)
    for _ in range(population * 50):
        if len(pool) >= population:
            break
        c = LayerConfig(tuple(int(v) for v in rng.integers(1, g + 1, size=l)))
        if c not in pool and budget.allows(cfg, c):
            pool.append(c)
    if not pool:
        raise BudgetError(f"no feasible individual found for {budget.metric} <= {budget.limit}")
    scores(pool)
    pool.sort(key=lambda c: _score_key(cache[c], c))

    for _ in range(iters):
        children = []
        for _ in range(population):
            a, b = (min(rng.integers(0, len(pool), size=2)) for _ in range(2))
            pa, pb = pool[a], pool[b]
            mix = rng.random(l) < 0.5
            child = [pa[j] if mix[j] else pb[j] for j in range(l)]
            if rng.random() < mutation_rate:
                child[int(rng.integers(0, l))] = int(rng.integers(1, g + 1))
            c = LayerConfig(tuple(child))
            if budget.allows(cfg, c):
                children.append(c)
        scores(children)
        merged = set(pool) | set(children)
        pool = sorted(merged, key=lambda c: _score_key(cache[c], c))[:population]
    return pool[0]


# -- sweeps and reports ---------------------------------------------------


@dataclass
class SweepPoint:
    config: LayerConfig
    params: int
    loss: float
    on_frontier: bool = False

    def to_dict(self) -> dict:
        return {"config": str(self.config), "params": self.params, "loss": self.loss, "on_frontier": self.on_frontier}


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of points not dominated in (params, loss), both minimized.

    A point is dominated when another has params and loss no larger and at
    least one strictly smaller. Exact duplicates are all kept.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1]))
    keep = []
    best_loss = float("inf")
    i = 0
    while i < len(order):
        # group equal-params points; only their minimum loss can survive
        j = i
        while j < len(order) and points[order[j]][0] == points[order[i]][0]:
            j += 1
        group = order[i:j]
        low = min(points[k][1] for k in group)
        if low < best_loss:
            keep.extend(k for k in group if points[k][1] == low)
            best_loss = low
        i = j
    return sorted(keep)


def pareto_sweep(model, corpus, configs: Iterable, max_tokens: int | None = None) -> list[SweepPoint]:
    """Measure every config and mark the frontier; sorted by params then loss."""
    from matformer.training import evaluate_loss

    cfg = model.config
    points = []
    for c in configs:
        c = cfg.check_config(c)
        points.append(SweepPoint(c, param_count(cfg, c), evaluate_loss(model, c, corpus, max_tokens=max_tokens)))
    return mark_frontier(points)


def mark_frontier(points: list[SweepPoint]) -> list[SweepPoint]:
    front = set(pareto_frontier([(p.params, p.loss) for p in points]))
    for i, p in enumerate(points):
        p.on_frontier = i in front
    return sorted(points, key=lambda p: (p.params, p.loss, tuple(p.config)))


@dataclass
class SearchResult:
    budget: Budget
    config: LayerConfig
    method: str
    predicted_loss: float | None = None
    measured_loss: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget.to_dict(),
            "config": self.config.to_list(),
            "predicted_loss": self.predicted_loss,
            "measured_loss": self.measured_loss,
            "method": self.method,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
