"""Toy-scale reproductions of the headline comparisons.

Each study trains (or takes) small models and returns plain dataclasses of
numbers; the acceptance tests and the ``report`` subcommand both build on
these so that one code path produces every reported figure.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from matformer.accounting import param_count
from matformer.config import LayerConfig, ModelConfig, enumerate_configs
from matformer.data import Corpus, reference_corpus
from matformer.inference import DecodeParams, consistency_kl, consistency_token_match, speculative_decode
from matformer.model import MatDecoderModel, named_rng
from matformer.retrieval import (
    RetrievalReport,
    adaptive_retrieval_experiment,
    encoder_config,
    make_retrieval_data,
    train_encoder,
)
from matformer.search import (
    Budget,
    PredictorDataset,
    evolutionary_search,
    fit_predictor,
    heuristic_select,
)
from matformer.training import (
    TrainingStrategy,
    baseline_configs,
    evaluate_loss,
    train,
    train_independent,
)

logger = logging.getLogger(__name__)

NAMES = ("S", "M", "L", "XL")


@dataclass
class Fig2Settings:
    """Shared setup of the strategy comparison (equal token budgets)."""

    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 64
    steps: int = 1000
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup: int = 100
    val_fraction: float = 0.02
    corpus_bytes: int = 2_000_000
    eval_tokens: int | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, context_len=self.context_len)

    def strategy(self, kind: str, seed: int) -> TrainingStrategy:
        return TrainingStrategy(
            kind=kind, steps=self.steps, batch_size=self.batch_size, peak_lr=self.peak_lr, warmup=self.warmup, seed=seed
        )

    def corpus(self) -> Corpus:
        return reference_corpus(self.corpus_bytes, val_fraction=self.val_fraction)


@dataclass
class StrategySuite:
    """Everything trained for one seed: three nested models and g baselines."""

    seed: int
    nested: dict[str, MatDecoderModel]
    baselines: list[MatDecoderModel]
    losses: dict[str, list[float]]
    seconds: float = 0.0

    def universal(self) -> MatDecoderModel:
        return self.nested["matformer"]


def train_suite(settings: Fig2Settings, corpus: Corpus, seed: int) -> StrategySuite:
    """Train all four strategies for one seed and score every granularity."""
    t0 = time.time()
    cfg = settings.model_config()
    l = cfg.n_layers
    nested = {}
    losses = {}
    for kind in ("matformer", "dynabert", "ofa"):
        model = MatDecoderModel(cfg, seed=seed)
        train(model, settings.strategy(kind, seed), corpus)
        nested[kind] = model
        losses[kind] = [
            float(evaluate_loss(model, LayerConfig.uniform(i, l), corpus, settings.eval_tokens)) for i in range(1, cfg.g + 1)
        ]
        logger.info("seed %d %s: %s", seed, kind, np.round(losses[kind], 4).tolist())
    baselines, _ = train_independent(baseline_configs(cfg), settings.strategy("independent", seed), corpus)
    losses["independent"] = [float(evaluate_loss(m, m.config.max_config(), corpus, settings.eval_tokens)) for m in baselines]
    logger.info("seed %d independent: %s", seed, np.round(losses["independent"], 4).tolist())
    return StrategySuite(seed, nested, baselines, losses, time.time() - t0)


@dataclass
class Fig2Summary:
    """Seed-mean validation losses per strategy, ordered S..XL."""

    per_seed: list[dict[str, list[float]]]

    def mean(self, kind: str) -> np.ndarray:
        return np.mean([s[kind] for s in self.per_seed], axis=0)

    def gap_s(self) -> float:
        """Baseline-S minus MatFormer-S (positive: MatFormer better)."""
        return float(self.mean("independent")[0] - self.mean("matformer")[0])

    def ofa_endpoint_gaps(self) -> tuple[float, float]:
        """OFA minus MatFormer at S and at XL."""
        diff = self.mean("ofa") - self.mean("matformer")
        return float(diff[0]), float(diff[-1])

    def ofa_dip(self) -> float:
        """How much further OFA trails MatFormer at the endpoints than in the middle."""
        diff = self.mean("ofa") - self.mean("matformer")
        return float((diff[0] + diff[-1]) / 2 - diff[1:-1].mean())

    def dynabert_gap(self) -> float:
        """Summed-over-granularities DynaBERT minus MatFormer loss."""
        return float(self.mean("dynabert").sum() - self.mean("matformer").sum())

    def to_dict(self) -> dict:
        kinds = self.per_seed[0].keys()
        return {
            "per_seed": self.per_seed,
            "mean": {k: self.mean(k).tolist() for k in kinds},
            "gap_s": self.gap_s(),
            "ofa_endpoint_gaps": list(self.ofa_endpoint_gaps()),
            "ofa_dip": self.ofa_dip(),
            "dynabert_gap": self.dynabert_gap(),
        }


# -- consistency ---------------------------------------------------------------


@dataclass
class ConsistencyRow:
    granularity: int
    matformer_match: float
    baseline_match: float
    matformer_kl: float
    baseline_kl: float


def validation_prefixes(corpus: Corpus, n: int, length: int, seed: int) -> list[np.ndarray]:
    val = corpus.validation
    rng = named_rng(seed, "data/prefixes")
    starts = rng.integers(0, val.size - length, size=n)
    return [val[s : s + length] for s in starts]


def consistency_study(
    suite: StrategySuite,
    corpus: Corpus,
    n_prefixes: int = 16,
    prefix_len: int = 16,
    horizon: int = 32,
    kl_tokens: int = 8192,
) -> list[ConsistencyRow]:
    """Agreement of each smaller model with its family's XL model.

    MatFormer submodels are compared with the MatFormer XL; each independent
    baseline with the XL baseline.
    """
    model = suite.universal()
    l = model.config.n_layers
    xl = LayerConfig.uniform(model.config.g, l)
    prefixes = validation_prefixes(corpus, n_prefixes, prefix_len, suite.seed)
    seq_len = model.config.context_len
    kl_text = corpus.validation_windows(seq_len, kl_tokens)[:, :-1]
    big = suite.baselines[-1]
    rows = []
    for gran in range(1, model.config.g):
        small_cfg = LayerConfig.uniform(gran, l)
        base = suite.baselines[gran - 1]
        rows.append(
            ConsistencyRow(
                gran,
                consistency_token_match(model, small_cfg, model, xl, prefixes, horizon),
                consistency_token_match(base, base.config.max_config(), big, big.config.max_config(), prefixes, horizon),
                consistency_kl(model, small_cfg, model, xl, kl_text),
                consistency_kl(base, base.config.max_config(), big, big.config.max_config(), kl_text),
            )
        )
    return rows


# -- Mix'n'Match -----------------------------------------------------------------


@dataclass
class BudgetOutcome:
    budget: int
    heuristic: list[int]
    heuristic_loss: float
    heuristic_percentile: float
    evolutionary: list[int]
    evolutionary_loss: float
    n_feasible: int


@dataclass
class MixnMatchStudy:
    losses: dict[tuple, float]
    outcomes: list[BudgetOutcome]
    predictor_mse: float
    variance_baseline: float

    def to_dict(self) -> dict:
        return {
            "outcomes": [asdict(o) for o in self.outcomes],
            "predictor_mse": self.predictor_mse,
            "variance_baseline": self.variance_baseline,
        }


def mixnmatch_study(
    model: MatDecoderModel,
    corpus: Corpus,
    fractions=(0.1, 0.3, 0.5, 0.7, 0.9),
    eval_tokens: int = 8192,
    n_predictor: int = 64,
    seed: int = 0,
) -> MixnMatchStudy:
    """Score every layer config exhaustively, then judge both selectors against it.

    Budgets are parameter counts at ``fractions`` of the way from the
    smallest to the largest uniform model. The predictor is fitted on
    ``n_predictor`` randomly chosen measured configs.
    """
    cfg = model.config
    l, g = cfg.n_layers, cfg.g
    configs = list(enumerate_configs(l, g))
    losses = {tuple(c): float(evaluate_loss(model, c, corpus, eval_tokens)) for c in configs}
    rng = named_rng(seed, "sampling")
    chosen = [configs[i] for i in rng.choice(len(configs), size=n_predictor, replace=False)]
    predictor = fit_predictor(PredictorDataset(chosen, np.array([losses[tuple(c)] for c in chosen])), cfg, seed=seed)
    lo = param_count(cfg, LayerConfig.uniform(1, l))
    hi = param_count(cfg, LayerConfig.uniform(g, l))
    outcomes = []
    for frac in fractions:
        budget = Budget("params", int(lo + frac * (hi - lo)))
        feasible = np.array([losses[tuple(c)] for c in configs if budget.allows(cfg, c)])
        heur = heuristic_select(budget, cfg)
        evo = evolutionary_search(predictor, budget, cfg, seed=seed)
        h_loss = losses[tuple(heur)]
        outcomes.append(
            BudgetOutcome(
                budget.limit,
                heur.to_list(),
                h_loss,
                100.0 * float(np.mean(feasible < h_loss)),
                evo.to_list(),
                losses[tuple(evo)],
                int(feasible.size),
            )
        )
    return MixnMatchStudy(losses, outcomes, predictor.heldout_mse, predictor.variance_baseline)


# -- speculative decoding --------------------------------------------------------


@dataclass
class SpecDecodeRow:
    draft: str
    accept_rate: float
    flops_vs_verifier_only: float


def specdecode_study(suite: StrategySuite, corpus: Corpus, n_prompts: int = 8, max_tokens: int = 32) -> list[SpecDecodeRow]:
    """Greedy acceptance of an S draft for the MatFormer XL verifier.

    Compares the nested S submodel (shared cache) with the independently
    trained S baseline as draft for the same verifier.
    """
    model = suite.universal()
    prompts = validation_prefixes(corpus, n_prompts, 16, suite.seed + 1)
    l = model.config.n_layers
    rows = []
    for name, draft_model, draft_cfg in (
        ("matformer-S", None, LayerConfig.uniform(1, l)),
        ("baseline-S", suite.baselines[0], suite.baselines[0].config.max_config()),
    ):
        accepted = drafted = 0
        pass_flops = only_flops = 0
        for p in prompts:
            _, st = speculative_decode(model, p, DecodeParams(max_tokens=max_tokens, draft_config=draft_cfg), draft_model)
            accepted += st.accepted
            drafted += st.drafted
            pass_flops += st.pass_flops
            only_flops += st.verifier_only_pass_flops
        rows.append(SpecDecodeRow(name, accepted / drafted, pass_flops / only_flops))
    return rows


# -- retrieval -------------------------------------------------------------------


@dataclass
class RetrievalSettings:
    steps: int = 1500
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup: int = 50
    cls_weight: float = 5.0
    data_kwargs: dict = field(default_factory=dict)


def retrieval_models(seed: int, settings: RetrievalSettings | None = None):
    """Train a nested encoder and g independent encoders on one synthetic dataset.

    Returns:
        ``(universal, baselines, data)``.
    """
    s = settings or RetrievalSettings()
    data = make_retrieval_data(seed=seed, **s.data_kwargs)
    cfg = encoder_config(alphabet=s.data_kwargs.get("alphabet", 16), seq_len=data.train.tokens.shape[1])

    def strategy(kind, steps, k):
        return TrainingStrategy(kind=kind, steps=steps, batch_size=s.batch_size, peak_lr=s.peak_lr, warmup=s.warmup, seed=k)

    universal = MatDecoderModel(cfg, seed=seed)
    train_encoder(universal, data.train, strategy("matformer", s.steps, seed), s.cls_weight)
    baselines = []
    for k, bcfg in enumerate(baseline_configs(cfg)):
        # separate init and data streams per baseline
        bseed = int(named_rng(seed, f"init/baseline{k}").integers(0, 2**31))
        model = MatDecoderModel(bcfg, seed=bseed)
        train_encoder(model, data.train, strategy("independent", s.steps // cfg.g, bseed), s.cls_weight)
        baselines.append(model)
    return universal, baselines, data


def retrieval_study(seed: int, settings: RetrievalSettings | None = None) -> RetrievalReport:
    """Embed the database with the nested encoder and queries with every encoder."""
    universal, baselines, data = retrieval_models(seed, settings)
    return adaptive_retrieval_experiment(universal, baselines, data)
