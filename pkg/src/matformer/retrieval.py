"""Adaptive retrieval with nested query encoders.

A database is embedded once by the universal model; queries are embedded by
cheaper encoders. Nested submodels share the universal model's metric space,
so their queries still find same-class neighbours, while independently
trained encoders live in unrelated spaces.

The toy task: each class is a Markov chain over a small alphabet, and the
encoder is a decoder trained with its language-modeling loss plus a
classification loss on the mean-pooled final hidden state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from matformer import nn
from matformer.config import LayerConfig, ModelConfig
from matformer.errors import ConfigError, DimensionError
from matformer.model import MatDecoderModel, named_rng
from matformer.training import TrainingLog, TrainingStrategy, _run

logger = logging.getLogger(__name__)


@dataclass
class ClusteredSequences:
    """Labelled token sequences; ``tokens`` is ``[N, T]``."""

    tokens: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.labels.size)

    def subset(self, idx) -> ClusteredSequences:
        return ClusteredSequences(self.tokens[idx], self.labels[idx], self.n_classes)


def class_chains(n_classes: int, alphabet: int, rng: np.random.Generator, concentration: float = 0.3) -> np.ndarray:
    """One random transition matrix per class, ``[C, A, A]``."""
    return rng.dirichlet(np.full(alphabet, concentration), size=(n_classes, alphabet))


def sample_sequences(
    chains: np.ndarray, per_class: int, seq_len: int, rng: np.random.Generator
) -> ClusteredSequences:
    n_classes, alphabet, _ = chains.shape
    labels = np.repeat(np.arange(n_classes), per_class)
    tokens = np.empty((labels.size, seq_len), dtype=np.int64)
    cdf = np.cumsum(chains, axis=-1)
    state = rng.integers(0, alphabet, size=labels.size)
    tokens[:, 0] = state
    for t in range(1, seq_len):
        u = rng.random(labels.size)[:, None]
        rows = cdf[labels, state]
        state = np.minimum((u * rows[:, -1:] > rows).sum(axis=1), alphabet - 1)
        tokens[:, t] = state
    return ClusteredSequences(tokens, labels, n_classes)


@dataclass
class RetrievalData:
    train: ClusteredSequences
    database: ClusteredSequences
    queries: ClusteredSequences

    @property
    def chance(self) -> float:
        """Accuracy of always predicting the most common database label, in percent."""
        counts = np.bincount(self.queries.labels, minlength=self.queries.n_classes)
        return 100.0 * counts.max() / counts.sum()


def make_retrieval_data(
    n_classes: int = 64,
    alphabet: int = 16,
    seq_len: int = 32,
    n_train: int = 256,
    n_database: int = 16,
    n_queries: int = 8,
    seed: int = 0,
    concentration: float = 0.3,
) -> RetrievalData:
    """Class-conditional Markov sequences split into train, database and query sets (counts per class)."""
    rng = named_rng(seed, "data/retrieval")
    chains = class_chains(n_classes, alphabet, rng, concentration)
    return RetrievalData(
        train=sample_sequences(chains, n_train, seq_len, rng),
        database=sample_sequences(chains, n_database, seq_len, rng),
        queries=sample_sequences(chains, n_queries, seq_len, rng),
    )


def encoder_config(alphabet: int = 16, seq_len: int = 32, d_model: int = 32, n_layers: int = 2, d_ff=None) -> ModelConfig:
    return ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=4, vocab_size=alphabet, context_len=seq_len, d_ff=d_ff)


# -- embeddings -------------------------------------------------------------


def _pool_weights(tokens: np.ndarray, pad_id: int | None) -> np.ndarray:
    mask = np.ones(tokens.shape) if pad_id is None else (tokens != pad_id).astype(np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("cannot embed a sequence with no unmasked tokens")
    return mask / counts


def pooled_hidden(model: MatDecoderModel, tokens: np.ndarray, config, pad_id: int | None = None) -> nn.Tensor:
    """Masked mean of final hidden states, ``[B, d_model]``; differentiable."""
    hidden = model.hidden_states(tokens, config)
    weights = nn.Tensor(_pool_weights(tokens, pad_id)[:, None, :])
    pooled = nn.matmul(weights, hidden)
    return nn.reshape(pooled, (tokens.shape[0], model.config.d_model))


def embed(model: MatDecoderModel, config, tokens, pad_id: int | None = None) -> np.ndarray:
    """Embedding of one sequence (``[T]`` -> ``[d]``) or a batch (``[N, T]`` -> ``[N, d]``).

    Positions holding ``pad_id`` are left out of the pool. Padding must come
    after the content so that causal attention never sees it.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    if tokens.shape[1] == 0:
        raise ValueError("cannot embed an empty sequence")
    out = []
    with nn.no_grad():
        for i in range(0, tokens.shape[0], 64):
            out.append(pooled_hidden(model, tokens[i : i + 64], config, pad_id).data)
    vecs = np.concatenate(out)
    return vecs[0] if single else vecs


@dataclass
class EmbeddingIndex:
    """Database vectors plus the identity of the encoder that produced them."""

    vectors: np.ndarray
    labels: np.ndarray
    fingerprint: str = ""
    config: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.labels.size:
            raise DimensionError("index needs one vector per label")

    @classmethod
    def build(cls, model: MatDecoderModel, config, data: ClusteredSequences) -> EmbeddingIndex:
        config = model.config.check_config(config if config is not None else model.config.max_config())
        return cls(embed(model, config, data.tokens), data.labels, model.fingerprint(), str(config))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def metadata(self) -> dict:
        return {"labels": self.labels.tolist(), "fingerprint": self.fingerprint, "config": self.config}

    @classmethod
    def from_checkpoint_parts(cls, vectors: np.ndarray, metadata: dict) -> EmbeddingIndex:
        return cls(vectors, np.array(metadata["labels"]), metadata.get("fingerprint", ""), metadata.get("config", ""))


TIE_TOL = 1e-12


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


def nearest_neighbors(index: EmbeddingIndex, queries: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Index of the most cosine-similar database vector per query (lowest index on ties).

    Similarities within :data:`TIE_TOL` of the best count as ties, so that
    rounding in the normalization cannot reorder parallel vectors.

    Args:
        exclude: Optional per-query database id to skip (self-match removal).
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise DimensionError(f"queries have shape {queries.shape}, index dimension is {index.dim}")
    sims = _normalize(queries) @ _normalize(index.vectors).T
    if exclude is not None:
        sims[np.arange(queries.shape[0]), exclude] = -np.inf
    best = sims.max(axis=1, keepdims=True)
    return np.argmax(sims >= best - TIE_TOL, axis=1)


def knn_eval(index: EmbeddingIndex, queries, labels, exclude=None) -> float:
    """1-NN label-match accuracy in percent."""
    if index.vectors.shape[0] == 0:
        raise ValueError("index is empty")
    nn_ids = nearest_neighbors(index, queries, exclude)
    return 100.0 * float(np.mean(index.labels[nn_ids] == np.asarray(labels)))


# -- training -----------------------------------------------------------------


def encoder_loss(
    model: MatDecoderModel, head: nn.Tensor, tokens: np.ndarray, labels: np.ndarray, config, cls_weight: float
) -> nn.Tensor:
    """Next-token loss plus ``cls_weight`` times classification loss on the pooled state."""
    hidden = model.hidden_states(tokens, config)
    logits = nn.matmul(hidden, nn.transpose(model.params["tok_emb"]))
    lm = nn.softmax_cross_entropy(nn.narrow(logits, 1, 0, tokens.shape[1] - 1), tokens[:, 1:])
    weights = nn.Tensor(_pool_weights(tokens, None)[:, None, :])
    pooled = nn.reshape(nn.matmul(weights, hidden), (tokens.shape[0], model.config.d_model))
    cls = nn.softmax_cross_entropy(nn.matmul(pooled, nn.transpose(head)), labels)
    return nn.add(lm, nn.scale(cls, cls_weight))


@dataclass
class EncoderRun:
    model: MatDecoderModel
    head: nn.Tensor
    log: TrainingLog = field(default_factory=TrainingLog)


def train_encoder(
    model: MatDecoderModel,
    data: ClusteredSequences,
    strategy: TrainingStrategy,
    cls_weight: float = 5.0,
) -> EncoderRun:
    """Train an encoder on the joint objective.

    ``strategy.kind == "matformer"`` samples one uniform granularity per step
    like language-model training; ``"independent"`` always trains the
    model's full config.
    """
    if strategy.kind not in ("matformer", "independent"):
        raise ConfigError(f"encoder training supports matformer or independent, got {strategy.kind!r}")
    cfg = model.config
    rng_head = named_rng(strategy.seed, "init/head")
    head = nn.parameter(rng_head.normal(0.0, cfg.init_std, (data.n_classes, cfg.d_model)), "head")
    sampler = named_rng(strategy.seed, "sampling")
    batches = named_rng(strategy.seed, "data")
    p = strategy.probs(cfg.g)

    def step_loss(step):
        if strategy.kind == "matformer":
            gran = int(sampler.choice(cfg.g, p=p)) + 1
            config = LayerConfig.uniform(gran, cfg.n_layers)
        else:
            gran = cfg.max_config()[0]
            config = cfg.max_config()
        idx = batches.integers(0, len(data), size=strategy.batch_size)
        tokens = data.tokens[idx]
        loss = encoder_loss(model, head, tokens, data.labels[idx], config, cls_weight)
        return loss, {"granularity": gran}, tokens.size

    log = _run(model, strategy, strategy.steps, step_loss, TrainingLog(), f"encoder/{strategy.kind}", extra_params=[head])
    return EncoderRun(model, head, log)


@dataclass
class RetrievalReport:
    chance: float
    matched: float
    matformer: dict[int, float]
    baselines: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "chance": self.chance,
            "matched": self.matched,
            "matformer": {str(k): v for k, v in self.matformer.items()},
            "baselines": {str(k): v for k, v in self.baselines.items()},
        }


def adaptive_retrieval_experiment(
    universal: MatDecoderModel, baselines: Sequence[MatDecoderModel], data: RetrievalData
) -> RetrievalReport:
    """Embed the database with the universal model and queries with every other encoder."""
    cfg = universal.config
    index = EmbeddingIndex.build(universal, cfg.max_config(), data.database)
    q = data.queries
    matformer = {}
    for gran in range(1, cfg.g + 1):
        vecs = embed(universal, LayerConfig.uniform(gran, cfg.n_layers), q.tokens)
        matformer[gran] = knn_eval(index, vecs, q.labels)
    base = {}
    for k, model in enumerate(baselines, start=1):
        if model.config.d_model != cfg.d_model:
            raise DimensionError("baseline embeddings must have the universal model's width")
        base[k] = knn_eval(index, embed(model, model.config.max_config(), q.tokens), q.labels)
    report = RetrievalReport(data.chance, matformer[cfg.g], matformer, base)
    logger.info("retrieval: %s", report.to_dict())
    return report
