"""Training loops for the nested model and the three baselines it is compared against.

All four strategies are configured from one :class:`TrainingStrategy` and are
budget-matched: ``steps * batch_tokens`` training tokens in total.

* ``matformer``: one uniformly-sized submodel per step, drawn from ``p``.
* ``dynabert``: ``g`` batches per update, one per granularity, losses averaged;
  ``steps // g`` updates.
* ``ofa``: an independent random granularity per layer each step.
* ``independent``: ``g`` separate models, ``steps // g`` updates each.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from matformer import nn
from matformer.config import GranularitySpec, LayerConfig, ModelConfig
from matformer.data import Corpus
from matformer.errors import ConfigError, NumericError
from matformer.model import MatDecoderModel, named_rng

logger = logging.getLogger(__name__)

STRATEGIES = ("matformer", "dynabert", "ofa", "independent")
BASELINE_FFN_RATIOS = (0.5, 1.0, 2.0, 4.0)

Hook = Callable[[int, MatDecoderModel], "dict | None"]


@dataclass
class TrainingStrategy:
    """Hyperparameters shared by every strategy.

    Attributes:
        kind: One of :data:`STRATEGIES`.
        sampling_probs: Per-granularity draw probabilities for ``matformer``;
            ``None`` means uniform.
        steps: Optimizer updates of the ``matformer`` run. The other
            strategies derive their update counts from this so that token
            budgets match.
        batch_size: Sequences per batch.
        seq_len: Tokens per sequence; ``None`` uses the model context.
        peak_lr: Learning rate at the end of warmup.
        warmup: Linear warmup steps, followed by inverse-sqrt decay.
        seed: Drives the ``sampling`` and ``data`` RNG streams.
    """

    kind: str = "matformer"
    sampling_probs: list[float] | None = None
    steps: int = 1000
    batch_size: int = 16
    seq_len: int | None = None
    peak_lr: float = 3e-3
    warmup: int = 100
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    clip_norm: float = 1.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.steps < 1 or self.batch_size < 1 or self.warmup < 0:
            raise ConfigError("steps and batch_size must be positive, warmup non-negative")
        if self.seq_len is not None and self.seq_len < 1:
            raise ConfigError("seq_len must be positive")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if self.sampling_probs is not None:
            p = np.asarray(self.sampling_probs, dtype=np.float64)
            if p.ndim != 1 or p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
                raise ConfigError(f"sampling_probs must be non-negative and sum to 1, got {self.sampling_probs}")
            self.sampling_probs = [float(x) for x in p]

    def probs(self, g: int) -> np.ndarray:
        if self.sampling_probs is None:
            return np.full(g, 1.0 / g)
        if len(self.sampling_probs) != g:
            raise ConfigError(f"{len(self.sampling_probs)} sampling probabilities for {g} granularities")
        return np.asarray(self.sampling_probs)

    def context(self, cfg: ModelConfig) -> int:
        t = self.seq_len or cfg.context_len
        if t > cfg.context_len:
            raise ConfigError(f"seq_len {t} exceeds context length {cfg.context_len}")
        return t

    def batch_tokens(self, cfg: ModelConfig) -> int:
        return self.batch_size * self.context(cfg)

    def lr(self, step: int) -> float:
        return nn.warmup_inverse_sqrt(step, self.peak_lr, self.warmup)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainingStrategy:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown strategy keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainingLog:
    """Per-update records; optionally mirrored to a JSON-lines file."""

    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def granularities(self) -> list:
        return [r.get("granularity") for r in self.records]


def _open_log(log_path) -> TrainingLog:
    if log_path is None:
        return TrainingLog()
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("", encoding="utf-8")
    return TrainingLog(path=path)


def lm_loss(model: MatDecoderModel, batch: np.ndarray, config) -> nn.Tensor:
    """Mean next-token NLL of ``batch`` (``[B, T + 1]``) under ``config``."""
    return nn.softmax_cross_entropy(model.forward(batch[:, :-1], config), batch[:, 1:])


def _optimizer(model: MatDecoderModel, strategy: TrainingStrategy, extra_params=()) -> nn.Adam:
    params = model.parameters() + list(extra_params)
    return nn.Adam(params, betas=strategy.betas, eps=strategy.eps, clip_norm=strategy.clip_norm)


def _run(
    model: MatDecoderModel,
    strategy: TrainingStrategy,
    n_updates: int,
    step_loss: Callable[[int], tuple[nn.Tensor, dict, int]],
    log: TrainingLog,
    label: str,
    extra_params=(),
    hook: Hook | None = None,
) -> TrainingLog:
    """Generic update loop.

    ``step_loss(step)`` builds the graph for one update and returns the loss,
    the log fields describing what was trained, and the tokens consumed.
    ``hook(step, model)`` runs after each update; a dict it returns is merged
    into that step's log record.
    """
    opt = _optimizer(model, strategy, extra_params)
    tokens_seen = 0
    for step in range(1, n_updates + 1):
        opt.zero_grad()
        try:
            loss, fields, tokens = step_loss(step)
            if not math.isfinite(loss.item()):
                raise NumericError("loss is not finite")
            loss.backward()
            lr = strategy.lr(step)
            opt.step(lr)
        except NumericError as exc:
            raise NumericError(f"{label}: training aborted at step {step}: {exc}") from exc
        tokens_seen += tokens
        record = {"step": step, "strategy": label, **fields, "loss": loss.item(), "lr": lr, "tokens_seen": tokens_seen}
        if hook is not None:
            record.update(hook(step, model) or {})
        log.append(record)
    return log


def _check_kind(strategy: TrainingStrategy, kind: str) -> None:
    if strategy.kind != kind:
        raise ConfigError(f"strategy kind is {strategy.kind!r}, expected {kind!r}")


def train_matformer(
    model: MatDecoderModel, strategy: TrainingStrategy, corpus: Corpus, log_path=None, hook: Hook | None = None
) -> TrainingLog:
    """Each step trains the uniform submodel ``[i] * l`` with ``i ~ p``."""
    _check_kind(strategy, "matformer")
    cfg = model.config
    p = strategy.probs(cfg.g)
    t = strategy.context(cfg)
    sampler = named_rng(strategy.seed, "sampling")
    data = named_rng(strategy.seed, "data")

    def step_loss(step):
        gran = int(sampler.choice(cfg.g, p=p)) + 1
        batch = corpus.sample_batch(data, strategy.batch_size, t)
        return lm_loss(model, batch, LayerConfig.uniform(gran, cfg.n_layers)), {"granularity": gran}, batch[:, 1:].size

    return _run(model, strategy, strategy.steps, step_loss, _open_log(log_path), "matformer", hook=hook)


def dynabert_loss(model: MatDecoderModel, batches: Sequence[np.ndarray]) -> nn.Tensor:
    """Mean over granularities of the loss of granularity ``i`` on ``batches[i - 1]``."""
    cfg = model.config
    losses = [lm_loss(model, b, LayerConfig.uniform(i + 1, cfg.n_layers)) for i, b in enumerate(batches)]
    total = losses[0]
    for extra in losses[1:]:
        total = nn.add(total, extra)
    return nn.scale(total, 1.0 / len(losses))


def train_dynabert(
    model: MatDecoderModel, strategy: TrainingStrategy, corpus: Corpus, log_path=None, hook: Hook | None = None
) -> TrainingLog:
    """``steps // g`` updates, each on ``g`` fresh batches (one per granularity)."""
    _check_kind(strategy, "dynabert")
    cfg = model.config
    t = strategy.context(cfg)
    data = named_rng(strategy.seed, "data")
    grans = list(range(1, cfg.g + 1))

    def step_loss(step):
        batches = [corpus.sample_batch(data, strategy.batch_size, t) for _ in grans]
        return dynabert_loss(model, batches), {"granularity": grans}, sum(b[:, 1:].size for b in batches)

    return _run(model, strategy, max(1, strategy.steps // cfg.g), step_loss, _open_log(log_path), "dynabert", hook=hook)


def sample_ofa_config(rng: np.random.Generator, n_layers: int, g: int) -> LayerConfig:
    return LayerConfig(tuple(int(i) for i in rng.integers(1, g + 1, size=n_layers)))


def train_ofa(
    model: MatDecoderModel, strategy: TrainingStrategy, corpus: Corpus, log_path=None, hook: Hook | None = None
) -> TrainingLog:
    """Each step trains a random Mix'n'Match config with per-layer uniform granularities."""
    _check_kind(strategy, "ofa")
    cfg = model.config
    t = strategy.context(cfg)
    sampler = named_rng(strategy.seed, "sampling")
    data = named_rng(strategy.seed, "data")

    def step_loss(step):
        config = sample_ofa_config(sampler, cfg.n_layers, cfg.g)
        batch = corpus.sample_batch(data, strategy.batch_size, t)
        return lm_loss(model, batch, config), {"granularity": config.to_list()}, batch[:, 1:].size

    return _run(model, strategy, strategy.steps, step_loss, _open_log(log_path), "ofa", hook=hook)


def baseline_configs(base: ModelConfig, ratios: Sequence[float] = BASELINE_FFN_RATIOS) -> list[ModelConfig]:
    """Plain (single-granularity) models with ``d_ff = ratio * d_model``."""
    out = []
    for r in ratios:
        d_ff = int(round(r * base.d_model))
        data = {**base.to_dict(), "d_ff": d_ff, "granularity": GranularitySpec((d_ff,)), "layer_max_gran": None}
        out.append(ModelConfig(**data))
    return out


def train_independent(
    configs: Sequence[ModelConfig], strategy: TrainingStrategy, corpus: Corpus, log_path=None, hook: Hook | None = None
) -> tuple[list[MatDecoderModel], TrainingLog]:
    """Train one fresh model per config for ``steps // len(configs)`` updates each.

    Model ``k`` is initialized and fed data from streams keyed by ``k``, so the
    baselines share neither weights nor batches.
    """
    _check_kind(strategy, "independent")
    if not configs:
        raise ConfigError("train_independent needs at least one config")
    log = _open_log(log_path)
    n_updates = max(1, strategy.steps // len(configs))
    models = []
    for k, cfg in enumerate(configs):
        model = MatDecoderModel(cfg, seed=_baseline_seed(strategy.seed, k))
        t = strategy.context(cfg)
        data = named_rng(strategy.seed, f"data/baseline{k}")
        config = cfg.max_config()

        def step_loss(step, model=model, data=data, t=t, config=config):
            batch = corpus.sample_batch(data, strategy.batch_size, t)
            return lm_loss(model, batch, config), {"granularity": k + 1, "d_ff": model.config.d_ff}, batch[:, 1:].size

        _run(model, strategy, n_updates, step_loss, log, "independent", hook=hook)
        models.append(model)
    return models, log


def _baseline_seed(seed: int, k: int) -> int:
    return int(named_rng(seed, f"init/baseline{k}").integers(0, 2**31))


def train(
    model: MatDecoderModel, strategy: TrainingStrategy, corpus: Corpus, log_path=None, hook: Hook | None = None
) -> TrainingLog:
    """Dispatch to the single-model strategies."""
    fn = {"matformer": train_matformer, "dynabert": train_dynabert, "ofa": train_ofa}.get(strategy.kind)
    if fn is None:
        raise ConfigError(f"strategy {strategy.kind!r} trains several models; use train_independent")
    return fn(model, strategy, corpus, log_path, hook)


def evaluate_loss(
    model: MatDecoderModel,
    config,
    corpus: Corpus,
    max_tokens: int | None = None,
    batch_size: int = 32,
    seq_len: int | None = None,
) -> float:
    """Mean token NLL (nats) over the validation split.

    Args:
        model: Model to score.
        config: Layer config to run.
        corpus: Source of the validation split.
        max_tokens: Optional cap on the number of validation tokens, taken
            from the start of the split.
        batch_size: Windows per forward pass; does not change the result
            beyond floating-point summation order.
        seq_len: Window length; defaults to the model context.
    """
    t = seq_len or model.config.context_len
    windows = corpus.validation_windows(t, max_tokens)
    total = 0.0
    count = 0
    with nn.no_grad():
        for i in range(0, windows.shape[0], batch_size):
            batch = windows[i : i + batch_size]
            logits = model.forward(batch[:, :-1], config).data
            logp = nn.log_softmax_np(logits)
            targets = batch[:, 1:]
            total += -np.take_along_axis(logp, targets[..., None], axis=-1).sum()
            count += targets.size
    return total / count
