"""Command-line entry point: ``matformer <subcommand>``.

Exit codes: 0 success, 2 user or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from matformer import checkpoint
from matformer.config import LayerConfig, ModelConfig, count_configs, enumerate_configs
from matformer.data import Corpus, decode_bytes, encode, reference_corpus
from matformer.errors import BudgetError, ConfigError, FitError, MatformerError, NumericError
from matformer.experiments import RetrievalSettings, retrieval_models, validation_prefixes
from matformer.inference import DecodeParams, consistency_kl, consistency_token_match, speculative_decode
from matformer.model import MatDecoderModel
from matformer.retrieval import EmbeddingIndex, adaptive_retrieval_experiment
from matformer.scaling import fit_power_law, read_points_csv, write_fit_json
from matformer.search import (
    Budget,
    PredictorDataset,
    SearchResult,
    evolutionary_search,
    exhaustive_search,
    fit_predictor,
    heuristic_select,
    least_slope_chain,
    pareto_sweep,
)
from matformer.training import TrainingStrategy, baseline_configs, evaluate_loss, train, train_independent

logger = logging.getLogger("matformer")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
EXHAUSTIVE_LIMIT = 65536
REFERENCE = "reference"


class UsageError(MatformerError, ValueError):
    """Bad command-line input that is not a config problem."""


@dataclass
class RunConfig:
    """Everything a training run needs; loaded from JSON.

    Attributes:
        model: :class:`ModelConfig` fields.
        strategy: :class:`TrainingStrategy` fields.
        corpus: Path to a text/binary file, or ``"reference"`` for the
            built-in corpus.
        output_dir: Run directory.
        seed: Seeds model init and every training stream.
        eval_every: Evaluate all granularities every this many updates
            (0: only at the end).
        eval_tokens: Cap on validation tokens per evaluation (``None``: all).
        val_fraction: Share of the corpus held out for validation.
    """

    model: dict
    strategy: dict = field(default_factory=dict)
    corpus: str = REFERENCE
    output_dir: str = "run"
    seed: int = 0
    eval_every: int = 0
    eval_tokens: int | None = None
    val_fraction: float = 0.05

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "model" not in data:
            raise ConfigError("run config needs a 'model' section")
        run = cls(**data)
        run.validate()
        return run

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        self.model_config()
        self.training_strategy()
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.eval_every, int) or self.eval_every < 0:
            raise ConfigError("eval_every must be a non-negative integer")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")

    def model_config(self) -> ModelConfig:
        if not isinstance(self.model, dict):
            raise ConfigError("'model' must be an object")
        try:
            return ModelConfig.from_dict(self.model)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def training_strategy(self) -> TrainingStrategy:
        if not isinstance(self.strategy, dict):
            raise ConfigError("'strategy' must be an object")
        try:
            strategy = TrainingStrategy.from_dict({**self.strategy, "seed": self.seed})
        except TypeError as exc:
            raise ConfigError(f"bad strategy: {exc}") from exc
        strategy.validate()
        return strategy

    def to_dict(self) -> dict:
        return asdict(self)


def load_corpus(spec: str, val_fraction: float) -> Corpus:
    if spec == REFERENCE:
        return reference_corpus(val_fraction=val_fraction)
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"corpus file {spec} not found")
    return Corpus.from_file(path, val_fraction=val_fraction)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(data, out: str | None) -> None:
    if out:
        _write_json(Path(out), data)
    print(json.dumps(data, indent=2, sort_keys=True))


def _granularity_losses(model: MatDecoderModel, corpus: Corpus, max_tokens) -> dict[str, float]:
    l = model.config.n_layers
    return {
        str(i): float(evaluate_loss(model, LayerConfig.uniform(i, l), corpus, max_tokens))
        for i in range(1, model.config.g + 1)
    }


# -- subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    for key in ("seed", "output_dir", "corpus"):
        value = getattr(args, key)
        if value is not None:
            setattr(run, key, value)
    if args.steps is not None:
        run.strategy = {**run.strategy, "steps": args.steps}
    run.validate()
    cfg = run.model_config()
    strategy = run.training_strategy()
    corpus = load_corpus(run.corpus, run.val_fraction)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run.to_dict())
    log_path = out / "train.log.jsonl"

    def hook(step, model):
        if run.eval_every and step % run.eval_every == 0:
            if model.config.g == 1:
                return {"eval": {"1": float(evaluate_loss(model, model.config.max_config(), corpus, run.eval_tokens))}}
            return {"eval": _granularity_losses(model, corpus, run.eval_tokens)}
        return None

    meta = {"run": run.to_dict()}
    if strategy.kind == "independent":
        models, _ = train_independent(baseline_configs(cfg), strategy, corpus, log_path, hook)
        result = {}
        for k, m in enumerate(models, start=1):
            checkpoint.save(out / f"baseline_{k}.matf", m, metadata=meta)
            result[str(k)] = float(evaluate_loss(m, m.config.max_config(), corpus, run.eval_tokens))
        summary = {"strategy": strategy.kind, "losses": result, "params": {str(k): m.param_count() for k, m in enumerate(models, 1)}}
    else:
        model = MatDecoderModel(cfg, seed=run.seed)
        train(model, strategy, corpus, log_path, hook)
        checkpoint.save(out / "model.matf", model, metadata=meta)
        l = cfg.n_layers
        summary = {
            "strategy": strategy.kind,
            "losses": _granularity_losses(model, corpus, run.eval_tokens),
            "params": {str(i): model.param_count(LayerConfig.uniform(i, l)) for i in range(1, cfg.g + 1)},
        }
    _write_json(out / "eval.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_extract(args) -> int:
    model = checkpoint.load_model(args.checkpoint)
    config = model.config.check_config(LayerConfig.parse(args.config))
    sub = model.extract_submodel(config)
    checkpoint.save(args.out, sub, metadata={"extracted_from": model.fingerprint(), "config": str(config)})
    info = {"config": str(config), "params": model.param_count(config), "flops_per_token": model.flops_per_token(config), "out": str(args.out)}
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def _checkpoint_run(model_meta: dict, corpus: str | None, val_fraction: float | None) -> Corpus:
    run = model_meta.get("run", {})
    spec = corpus or run.get("corpus", REFERENCE)
    frac = val_fraction or run.get("val_fraction", 0.05)
    return load_corpus(spec, frac)


def cmd_search(args) -> int:
    model, _, meta = checkpoint.load(args.checkpoint)
    cfg = model.config
    budget = Budget(args.metric, args.budget)
    if args.method == "exhaustive" and count_configs(cfg.n_layers, cfg.g) > EXHAUSTIVE_LIMIT:
        raise BudgetError(
            f"exhaustive search needs g^l <= {EXHAUSTIVE_LIMIT}, this model has {cfg.g}^{cfg.n_layers} configs"
        )
    corpus = _checkpoint_run(meta, args.corpus, args.val_fraction)

    def measure(c):
        return float(evaluate_loss(model, c, corpus, args.eval_tokens))

    predicted = None
    extra = {}
    if args.method == "heuristic":
        choice = heuristic_select(budget, cfg)
    elif args.method == "exhaustive":
        cache: dict = {}

        def score(c):
            key = tuple(c)
            if key not in cache:
                cache[key] = measure(c)
            return cache[key]

        choice = exhaustive_search(score, budget, cfg)
    else:
        rng = np.random.default_rng(args.seed)
        all_configs = list(enumerate_configs(cfg.n_layers, cfg.g)) if count_configs(cfg.n_layers, cfg.g) <= 4096 else None
        if all_configs is not None:
            picks = [all_configs[i] for i in rng.choice(len(all_configs), size=min(args.samples, len(all_configs)), replace=False)]
        else:
            picks = [LayerConfig(tuple(int(v) for v in rng.integers(1, cfg.g + 1, cfg.n_layers))) for _ in range(args.samples)]
        data = PredictorDataset(picks, np.array([measure(c) for c in picks]))
        # a space smaller than the usual minimum is simply measured in full
        predictor = fit_predictor(data, cfg, seed=args.seed, min_pairs=min(32, count_configs(cfg.n_layers, cfg.g)))
        choice = evolutionary_search(predictor, budget, cfg, iters=args.iters, seed=args.seed)
        predicted = float(predictor(choice))
        extra = {"predictor_heldout_mse": predictor.heldout_mse, "predictor_pairs": len(data)}
    result = SearchResult(budget, choice, args.method, predicted, measure(choice), extra)
    _emit(result.to_dict(), args.out)
    return EXIT_OK


def _parse_config(model: MatDecoderModel, text: str | None, default: LayerConfig) -> LayerConfig:
    if text is None:
        return default
    return model.config.check_config(LayerConfig.parse(text))


def cmd_specdecode(args) -> int:
    model = checkpoint.load_model(args.checkpoint)
    l = model.config.n_layers
    prompt = encode(Path(args.prompt_file).read_bytes())
    if prompt.size > model.config.context_len - args.max_tokens:
        # keep the most recent tokens that fit
        prompt = prompt[-(model.config.context_len - args.max_tokens) :]
    params = DecodeParams(
        mode=args.mode,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        seed=args.seed,
        draft_config=_parse_config(model, args.draft, LayerConfig.uniform(1, l)),
        verifier_config=_parse_config(model, args.verifier, model.config.max_config()),
        lookahead=args.lookahead,
        shared_cache=not args.no_shared_cache,
    )
    tokens, stats = speculative_decode(model, prompt, params)
    out = {
        "transcript": decode_bytes(tokens).decode("utf-8", errors="replace"),
        "tokens": tokens.tolist(),
        "stats": {
            k: v
            for k, v in stats.to_dict().items()
            if k in ("accept_rate", "tokens", "rounds", "draft_flops", "verifier_flops", "flops_vs_verifier_only")
        },
    }
    _emit(out, args.out)
    return EXIT_OK


def cmd_consistency(args) -> int:
    model_a, _, meta = checkpoint.load(args.checkpoint_a)
    model_b = checkpoint.load_model(args.checkpoint_b) if args.checkpoint_b else model_a
    config_a = _parse_config(model_a, args.config_a, LayerConfig.uniform(1, model_a.config.n_layers))
    config_b = _parse_config(model_b, args.config_b, model_b.config.max_config())
    corpus = _checkpoint_run(meta, args.corpus, args.val_fraction)
    prefixes = validation_prefixes(corpus, args.prefixes, args.prefix_len, args.seed)
    text = corpus.validation_windows(model_a.config.context_len, args.kl_tokens)[:, :-1]
    out = {
        "config_a": str(config_a),
        "config_b": str(config_b),
        "token_match": consistency_token_match(
            model_a, config_a, model_b, config_b, prefixes, args.horizon, teacher_forced=args.teacher_forced
        ),
        "kl": consistency_kl(model_a, config_a, model_b, config_b, text, reverse=args.reverse_kl),
    }
    _emit(out, args.out)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    universal, baselines, data = retrieval_models(args.seed, RetrievalSettings(steps=args.steps))
    report = adaptive_retrieval_experiment(universal, baselines, data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = EmbeddingIndex.build(universal, None, data.database)
    checkpoint.save(out / "index.matf", universal, {"index": index.vectors}, {"index": index.metadata()})
    _write_json(out / "report.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_scaling_fit(args) -> int:
    fit = fit_power_law(read_points_csv(args.points))
    if args.out:
        write_fit_json(args.out, fit)
    print(json.dumps(fit.to_dict(), sort_keys=True))
    return EXIT_OK


def report_configs(cfg: ModelConfig, limit: int = 256) -> list[LayerConfig]:
    """Every layer config when there are at most ``limit``, else the least-slope chain."""
    if count_configs(cfg.n_layers, cfg.g) <= limit:
        return list(enumerate_configs(cfg.n_layers, cfg.g))
    return least_slope_chain(cfg.n_layers, cfg.g)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    ckpt = run_dir / "model.matf"
    if not (run_dir / "train.log.jsonl").is_file() or not ckpt.is_file():
        raise UsageError(f"{run_dir} is missing train.log.jsonl or model.matf (is this a completed nested run?)")
    model, _, meta = checkpoint.load(ckpt)
    cfg = model.config
    corpus = _checkpoint_run(meta, None, None)
    points = pareto_sweep(model, corpus, report_configs(cfg), max_tokens=args.eval_tokens)
    _write_csv(
        run_dir / "loss_vs_params.csv",
        ["config", "params", "flops_per_token", "loss", "on_frontier"],
        [[str(p.config), p.params, model.flops_per_token(p.config), repr(p.loss), int(p.on_frontier)] for p in points],
    )
    _write_csv(
        run_dir / "pareto.csv",
        ["config", "params", "loss"],
        [[str(p.config), p.params, repr(p.loss)] for p in points if p.on_frontier],
    )
    prefixes = validation_prefixes(corpus, args.prefixes, 16, 0)
    text = corpus.validation_windows(cfg.context_len, args.kl_tokens)[:, :-1]
    xl = cfg.max_config()
    rows = []
    for gran in range(1, cfg.g + 1):
        c = LayerConfig.uniform(gran, cfg.n_layers)
        rows.append([gran, str(c), repr(consistency_token_match(model, c, model, xl, prefixes, args.horizon)), repr(consistency_kl(model, c, model, xl, text))])
    _write_csv(run_dir / "consistency.csv", ["granularity", "config", "token_match", "kl"], rows)
    print(json.dumps({"run_dir": str(run_dir), "configs": len(points), "frontier": sum(p.on_frontier for p in points)}))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matformer", description="Nested transformer training, extraction and analysis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write a standalone submodel checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help='per-layer granularities, e.g. "2,2,3,4"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("search", help="pick a Mix'n'Match config under a budget")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--metric", default="params", choices=["params", "flops_per_token", "ffn_width"])
    p.add_argument("--method", default="heuristic", choices=["heuristic", "nas", "exhaustive"])
    p.add_argument("--corpus")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--eval-tokens", dest="eval_tokens", type=int, default=8192)
    p.add_argument("--samples", type=int, default=64, help="measured configs for the nas predictor")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("specdecode", help="speculative decoding with a nested draft")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt-file", dest="prompt_file", required=True)
    p.add_argument("--draft")
    p.add_argument("--verifier")
    p.add_argument("--max-tokens", dest="max_tokens", type=int, default=32)
    p.add_argument("--lookahead", type=int, default=4)
    p.add_argument("--mode", default="greedy", choices=["greedy", "sample"])
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-shared-cache", dest="no_shared_cache", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_specdecode)

    p = sub.add_parser("consistency", help="token-match and KL agreement between two models")
    p.add_argument("--checkpoint-a", dest="checkpoint_a", required=True)
    p.add_argument("--config-a", dest="config_a")
    p.add_argument("--checkpoint-b", dest="checkpoint_b")
    p.add_argument("--config-b", dest="config_b")
    p.add_argument("--corpus")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--prefixes", type=int, default=16)
    p.add_argument("--prefix-len", dest="prefix_len", type=int, default=16)
    p.add_argument("--horizon", type=int, default=32)
    p.add_argument("--kl-tokens", dest="kl_tokens", type=int, default=8192)
    p.add_argument("--teacher-forced", dest="teacher_forced", action="store_true")
    p.add_argument("--reverse-kl", dest="reverse_kl", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("retrieve", help="adaptive retrieval on synthetic clustered sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("scaling-fit", help="fit Loss = a (N D)^b + c to a CSV of N,D,loss")
    p.add_argument("--points", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scaling_fit)

    p = sub.add_parser("report", help="write plot-ready CSVs for a run directory")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--eval-tokens", dest="eval_tokens", type=int, default=8192)
    p.add_argument("--prefixes", type=int, default=8)
    p.add_argument("--horizon", type=int, default=16)
    p.add_argument("--kl-tokens", dest="kl_tokens", type=int, default=4096)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MATFORMER_THREADS")
    if threads is not None and not threads.isdigit():
        print(f"error: MATFORMER_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except (NumericError, FitError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MatformerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
