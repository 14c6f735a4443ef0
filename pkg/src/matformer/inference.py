"""Autoregressive decoding, speculative decoding with nested drafts, and consistency metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from matformer import nn
from matformer.config import LayerConfig
from matformer.errors import ConfigError, LengthError
from matformer.model import KVCache, MatDecoderModel, named_rng

logger = logging.getLogger(__name__)

MODES = ("greedy", "sample")


@dataclass
class DecodeParams:
    """Decoding settings.

    Attributes:
        mode: ``greedy`` or ``sample`` (temperature sampling).
        temperature: Softmax temperature for sampling; must be positive.
        max_tokens: Number of tokens to generate.
        seed: Seeds the ``decode`` RNG stream.
        draft_config: Draft submodel for speculative decoding.
        verifier_config: Verifier submodel; ``None`` means the full model.
        lookahead: Draft tokens proposed per round (K).
        shared_cache: Let draft and verifier share one KV cache when their
            attention shapes agree.
    """

    mode: str = "greedy"
    temperature: float = 1.0
    max_tokens: int = 32
    seed: int = 0
    draft_config: LayerConfig | None = None
    verifier_config: LayerConfig | None = None
    lookahead: int = 4
    shared_cache: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ConfigError("temperature must be positive when sampling")
        if self.lookahead < 1:
            raise ConfigError("lookahead must be at least 1")
        if self.max_tokens < 0:
            raise ConfigError("max_tokens must be non-negative")
        if self.draft_config is not None:
            self.draft_config = LayerConfig.coerce(self.draft_config)
        if self.verifier_config is not None:
            self.verifier_config = LayerConfig.coerce(self.verifier_config)


def next_token_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse-CDF draw; one uniform per token keeps streams aligned across runs
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), probs.size - 1))


def _check_room(model: MatDecoderModel, prompt: np.ndarray, max_tokens: int) -> None:
    if prompt.size == 0:
        raise LengthError("prompt must contain at least one token")
    if prompt.size + max_tokens > model.config.context_len:
        raise LengthError(
            f"prompt of {prompt.size} plus {max_tokens} new tokens exceeds context length {model.config.context_len}"
        )


def _catch_up(model: MatDecoderModel, config, seq: list[int], cache: KVCache) -> np.ndarray:
    """Feed the tokens the cache has not seen; return logits for those positions."""
    with nn.no_grad():
        return model.forward(np.asarray(seq[cache.length :]), config, cache).data


def decode(model: MatDecoderModel, config, prompt, params: DecodeParams, use_cache: bool = True) -> np.ndarray:
    """Generate ``params.max_tokens`` tokens after ``prompt``.

    Returns:
        The generated tokens only (the prompt is not repeated).

    Raises:
        LengthError: If the prompt plus the generated tokens would exceed the
            model context.
    """
    config = model.config.check_config(config if config is not None else model.config.max_config())
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    _check_room(model, prompt, params.max_tokens)
    rng = named_rng(params.seed, "decode")
    seq = prompt.tolist()
    cache = model.new_cache(config) if use_cache else None
    out = []
    for _ in range(params.max_tokens):
        if cache is not None:
            logits = _catch_up(model, config, seq, cache)[-1]
        else:
            with nn.no_grad():
                logits = model.forward(np.asarray(seq), config).data[-1]
        if params.mode == "greedy":
            tok = int(np.argmax(logits))
        else:
            tok = _draw(next_token_probs(logits, params.temperature), rng)
        seq.append(tok)
        out.append(tok)
    return np.array(out, dtype=np.int64)


@dataclass
class SpecStats:
    """Counters from one speculative decoding run.

    ``draft_flops`` and ``verifier_flops`` charge every processed token its
    per-token FLOPs. ``flops_vs_verifier_only`` instead charges each forward
    pass the per-token FLOPs of its model once, which is the relevant cost in
    weight-bound decoding where scoring a few tokens together costs about as
    much as scoring one; it compares against plain verifier decoding under
    the same model (one pass per generated token).
    """

    tokens: int = 0
    rounds: int = 0
    drafted: int = 0
    accepted: int = 0
    draft_passes: int = 0
    verifier_passes: int = 0
    draft_tokens_processed: int = 0
    verifier_tokens_processed: int = 0
    draft_flops: int = 0
    verifier_flops: int = 0
    pass_flops: int = 0
    verifier_only_pass_flops: int = 0
    shared_cache: bool = False

    @property
    def accept_rate(self) -> float:
        return self.accepted / self.drafted if self.drafted else 1.0

    @property
    def flops_vs_verifier_only(self) -> float:
        return self.pass_flops / self.verifier_only_pass_flops if self.verifier_only_pass_flops else float("nan")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["accept_rate"] = self.accept_rate
        out["flops_vs_verifier_only"] = self.flops_vs_verifier_only
        return out


def speculative_decode(
    model: MatDecoderModel,
    prompt,
    params: DecodeParams,
    draft_model: MatDecoderModel | None = None,
) -> tuple[np.ndarray, SpecStats]:
    """Draft-then-verify decoding whose output follows the verifier exactly.

    Each round the draft proposes up to ``K`` tokens autoregressively, then
    the verifier scores the last accepted token plus every draft in a single
    pass. Greedy mode accepts drafts while they equal the verifier's argmax
    and then emits the verifier's token; sampling mode accepts draft ``x``
    with probability ``min(1, p(x) / q(x))`` and on rejection resamples from
    ``max(0, p - q)`` normalized. When every draft is accepted the verifier's
    next token comes free.

    With a nested draft whose attention shapes match the verifier's, one KV
    cache serves both: the draft appends its own entries and the verifier's
    pass overwrites every position it scores.

    Args:
        model: Holds the verifier (and the draft unless ``draft_model``).
        prompt: Token ids.
        params: ``draft_config``/``verifier_config`` select the submodels.
        draft_model: Optional separate draft model (e.g. an independently
            trained baseline); ``params.draft_config`` then applies to it.

    Raises:
        ConfigError: If a nested draft is larger than the verifier in any layer.
    """
    vcfg = model.config.check_config(params.verifier_config or model.config.max_config())
    dmodel = draft_model or model
    dcfg = dmodel.config.check_config(params.draft_config or LayerConfig.uniform(1, dmodel.config.n_layers))
    if draft_model is None and not dcfg.dominated_by(vcfg):
        raise ConfigError(f"draft config {dcfg} is not nested in verifier config {vcfg}")
    if draft_model is not None and draft_model.config.vocab_size != model.config.vocab_size:
        raise ConfigError("draft and verifier vocabularies differ")
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    _check_room(model, prompt, params.max_tokens)
    if dmodel.config.context_len < prompt.size + params.max_tokens:
        raise LengthError("draft model context is too short")

    greedy = params.mode == "greedy"
    rng = named_rng(params.seed, "decode")
    f_draft = dmodel.flops_per_token(dcfg)
    f_verify = model.flops_per_token(vcfg)

    vcache = model.new_cache(vcfg)
    shared = params.shared_cache and draft_model is None and dmodel.new_cache(dcfg).widths == vcache.widths
    dcache = vcache if shared else dmodel.new_cache(dcfg)
    verified = 0  # prefix of vcache written by the verifier itself
    stats = SpecStats(shared_cache=shared)

    seq = prompt.tolist()
    target = prompt.size + params.max_tokens
    while len(seq) < target:
        n = len(seq)
        k = min(params.lookahead, target - n - 1)
        drafts: list[int] = []
        draft_probs: list[np.ndarray] = []
        if k > 0 and shared:
            dcache.truncate(verified)
        for _ in range(k):
            ext = seq + drafts
            fed = len(ext) - dcache.length
            logits = _catch_up(dmodel, dcfg, ext, dcache)[-1]
            stats.draft_passes += 1
            stats.draft_tokens_processed += fed
            if greedy:
                drafts.append(int(np.argmax(logits)))
            else:
                q = next_token_probs(logits, params.temperature)
                draft_probs.append(q)
                drafts.append(_draw(q, rng))

        vcache.truncate(verified)
        fed = n + k - verified
        rows = _catch_up(model, vcfg, seq + drafts, vcache)[-(k + 1) :]
        stats.verifier_passes += 1
        stats.verifier_tokens_processed += fed

        accepted = 0
        emitted: int | None = None
        for i, d in enumerate(drafts):
            if greedy:
                top = int(np.argmax(rows[i]))
                if d == top:
                    accepted += 1
                    continue
                emitted = top
                break
            p = next_token_probs(rows[i], params.temperature)
            q = draft_probs[i]
            if rng.random() < min(1.0, p[d] / q[d]):
                accepted += 1
                continue
            residual = np.maximum(p - q, 0.0)
            emitted = _draw(residual / residual.sum(), rng)
            break
        if emitted is None:
            last = rows[k]
            emitted = int(np.argmax(last)) if greedy else _draw(next_token_probs(last, params.temperature), rng)

        seq.extend(drafts[:accepted])
        seq.append(emitted)
        stats.rounds += 1
        stats.drafted += k
        stats.accepted += accepted
        # keep only entries computed from tokens that survived the round
        verified = n + accepted
        vcache.truncate(verified)
        if not shared and dcache.length > verified:
            dcache.truncate(verified)

    stats.tokens = len(seq) - prompt.size
    stats.draft_flops = stats.draft_tokens_processed * f_draft
    stats.verifier_flops = stats.verifier_tokens_processed * f_verify
    stats.pass_flops = stats.draft_passes * f_draft + stats.verifier_passes * f_verify
    stats.verifier_only_pass_flops = stats.tokens * f_verify
    return np.array(seq[prompt.size :], dtype=np.int64), stats


# -- consistency -------------------------------------------------------------


def consistency_token_match(
    model_a: MatDecoderModel,
    config_a,
    model_b: MatDecoderModel,
    config_b,
    prefixes,
    horizon: int,
    teacher_forced: bool = False,
) -> float:
    """Percentage of positions where two models' greedy continuations agree.

    By default both decode independently from each prefix. With
    ``teacher_forced`` model ``a`` instead predicts each next token given
    model ``b``'s continuation so far.
    """
    if model_a.config.vocab_size != model_b.config.vocab_size:
        raise ConfigError("models have different vocabularies")
    params = DecodeParams(mode="greedy", max_tokens=horizon)
    matches = []
    for prefix in prefixes:
        prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
        ref = decode(model_b, config_b, prefix, params)
        if teacher_forced:
            with nn.no_grad():
                seq = np.concatenate([prefix, ref[:-1]])
                logits = model_a.forward(seq, config_a).data[prefix.size - 1 :]
            other = logits.argmax(axis=-1)
        else:
            other = decode(model_a, config_a, prefix, params)
        matches.append(np.mean(other == ref))
    return 100.0 * float(np.mean(matches))


def _kl_rows(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    return (np.exp(logp) * (logp - logq)).sum(axis=-1)


def consistency_kl(
    model_a: MatDecoderModel,
    config_a,
    model_b: MatDecoderModel,
    config_b,
    tokens,
    reverse: bool = False,
    batch_size: int = 32,
) -> float:
    """Mean per-position ``KL(P_a || P_b)`` on teacher-forced text (``reverse`` swaps it).

    Args:
        tokens: ``[T]`` or ``[N, T]`` token ids; every position is scored.
    """
    if model_a.config.vocab_size != model_b.config.vocab_size:
        raise ConfigError("models have different vocabularies")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    total = 0.0
    count = 0
    with nn.no_grad():
        for i in range(0, tokens.shape[0], batch_size):
            batch = tokens[i : i + batch_size]
            la = nn.log_softmax_np(model_a.forward(batch, config_a).data)
            lb = nn.log_softmax_np(model_b.forward(batch, config_b).data)
            kl = _kl_rows(lb, la) if reverse else _kl_rows(la, lb)
            total += float(kl.sum())
            count += kl.size
    return total / count
