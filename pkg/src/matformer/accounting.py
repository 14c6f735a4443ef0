"""Parameter and FLOP accounting for extracted submodels.

FLOPs use the usual ``2 * params`` multiply-accumulate count per token for
every weight matmul, plus ``2 * 2 * n_ctx * d_attn`` per layer for the
score and value products against a full context. Training is 3x forward.
"""

from __future__ import annotations

from matformer.config import LayerConfig, ModelConfig


def param_breakdown(cfg: ModelConfig, config=None) -> dict[str, int]:
    """Parameter counts per component for one submodel."""
    config = cfg.check_config(config if config is not None else cfg.max_config())
    d = cfg.d_model
    attention = ffn = norms = 0
    for gran in config:
        attention += 4 * d * cfg.attn_width(gran)
        ffn += 2 * cfg.granularity.width(gran) * d
        norms += 4 * d
    norms += 2 * d
    return {
        "embedding": cfg.vocab_size * d + cfg.context_len * d,
        "attention": attention,
        "ffn": ffn,
        "norm": norms,
    }


def param_count(cfg: ModelConfig, config=None, include_embeddings: bool = False) -> int:
    parts = param_breakdown(cfg, config)
    total = parts["attention"] + parts["ffn"] + parts["norm"]
    return total + parts["embedding"] if include_embeddings else total


def flops_breakdown(cfg: ModelConfig, config=None, phase: str = "infer") -> dict[str, int]:
    """Per-token FLOPs split into attention projections, MLP, attention scores and logits."""
    if phase not in ("train", "infer"):
        raise ValueError(f"phase must be 'train' or 'infer', got {phase!r}")
    config = cfg.check_config(config if config is not None else cfg.max_config())
    d = cfg.d_model
    mult = 3 if phase == "train" else 1
    attention = mlp = scores = 0
    for gran in config:
        da = cfg.attn_width(gran)
        attention += 2 * 4 * d * da
        mlp += 2 * 2 * d * cfg.granularity.width(gran)
        scores += 2 * 2 * cfg.context_len * da
    logits = 2 * d * cfg.vocab_size
    return {
        "attention": mult * attention,
        "mlp": mult * mlp,
        "attention_scores": mult * scores,
        "logits": mult * logits,
    }


def flops_per_token(cfg: ModelConfig, config=None, phase: str = "infer") -> int:
    return sum(flops_breakdown(cfg, config, phase).values())


def granularity_pass_factors(cfg: ModelConfig) -> dict[str, float]:
    """FLOP cost of one pass through every uniform granularity, relative to one full pass.

    This is the per-token overhead of a nested training schedule that visits
    each granularity once, split by component.
    """
    full = flops_breakdown(cfg, LayerConfig.uniform(cfg.g, cfg.n_layers))
    summed = {key: 0 for key in full}
    for gran in range(1, cfg.g + 1):
        for key, value in flops_breakdown(cfg, LayerConfig.uniform(gran, cfg.n_layers)).items():
            summed[key] += value
    factors = {key: summed[key] / full[key] for key in full}
    weights = full["attention"] + full["mlp"]
    factors["attention+mlp"] = (summed["attention"] + summed["mlp"]) / weights
    return factors
