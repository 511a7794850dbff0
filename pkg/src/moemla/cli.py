"""Command-line entry point: ``moemla {train,generate,analyze,route-stats}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default output directory comes from ``$MOEMLA_OUT_DIR`` (else ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import complexity_report
from .config import RunConfig
from .exceptions import CacheError, CheckpointError, ConfigurationError, DecodeError
from .model import LanguageModel, load_checkpoint
from .moe import combination_entropy, load_cv, routing_combinations
from .tensor import no_grad
from .trainer import ByteTokenizer, Corpus, TrainingError, train

log = logging.getLogger("moemla")

OUT_DIR_ENV = "MOEMLA_OUT_DIR"


class UsageError(Exception):
    pass


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return RunConfig.from_dict(data)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _set_nested(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _out_dir(run: RunConfig) -> Path:
    return Path(run.paths.out_dir or os.environ.get(OUT_DIR_ENV, "runs"))


def _run_training(run: RunConfig, out_dir: Path) -> dict:
    if not run.paths.corpus:
        raise UsageError("paths.corpus: required (path to a plain-text corpus)")
    corpus_path = Path(run.paths.corpus)
    if not corpus_path.is_file():
        raise UsageError(f"paths.corpus: cannot read {corpus_path}")
    if run.model.vocab_size < 256:
        raise UsageError("model.vocab_size: byte-level corpora need at least 256 entries")
    if run.train.seq_len > run.model.max_seq:
        raise UsageError(f"train.seq_len: {run.train.seq_len} exceeds model.max_seq={run.model.max_seq}")
    corpus = Corpus.from_file(corpus_path, ByteTokenizer(), run.train.val_fraction)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True))
    metrics = out_dir / run.paths.metrics_file
    metrics.write_text("")
    model = LanguageModel(run.model)
    summary = train(model, corpus, run.train, metrics_path=metrics, routes_path=out_dir / "routes.jsonl",
                    out_dir=out_dir)
    summary.pop("records")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    raw = run.to_dict()
    if args.steps is not None:
        raw["train"]["steps"] = args.steps
    if args.seed is not None:
        raw["train"]["seed"] = args.seed
        raw["model"]["seed"] = args.seed
    if args.out_dir:
        raw["paths"]["out_dir"] = args.out_dir
    if args.corpus:
        raw["paths"]["corpus"] = args.corpus
    try:
        run = RunConfig.from_dict(raw)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out_dir = _out_dir(run)

    if not args.sweep:
        summary = _run_training(run, out_dir)
        print(json.dumps(summary, sort_keys=True))
        return 0

    key, _, values = args.sweep.partition("=")
    if not key or not values:
        raise UsageError("--sweep expects key=v1,v2,...")
    rows = []
    for text in values.split(","):
        variant = run.to_dict()
        _set_nested(variant, key, _parse_value(text))
        try:
            vrun = RunConfig.from_dict(variant)
        except (ConfigurationError, TypeError) as exc:
            raise UsageError(f"--sweep {key}={text}: {exc}") from exc
        summary = _run_training(vrun, out_dir / f"sweep_{key}_{text}")
        row = {key: text, "final_loss": summary["final_loss"], "val_loss": summary.get("val_loss")}
        for i, cv in enumerate(summary.get("final_cv", [])):
            row[f"cv_layer{i}"] = cv
        rows.append(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = sorted({f for r in rows for f in r}, key=lambda f: (f != key, f))
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print((out_dir / "sweep.csv").read_text(), end="")
    return 0


def _load_model(path) -> LanguageModel:
    try:
        model, _ = load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    return model


def cmd_generate(args) -> int:
    model = _load_model(args.ckpt)
    tok = ByteTokenizer()
    prompt = tok.encode(args.prompt)
    if args.max_new == 0:
        sys.stdout.write(args.prompt + "\n")
        return 0
    if args.greedy or args.temperature is None:
        mode, temperature = "greedy", 1.0
    else:
        mode = "top-p" if args.top_p < 1.0 else "temperature"
        temperature = args.temperature
    out = model.generate(prompt, args.max_new, mode=mode, temperature=temperature, top_p=args.top_p,
                         rng=np.random.default_rng(args.seed), use_cache=not args.no_cache)
    sys.stdout.write(args.prompt + tok.decode(out[len(prompt):]) + "\n")
    return 0


def cmd_analyze(args) -> int:
    run = load_run_config(args.config)
    report = complexity_report(run.model, args.seq_len, measure_forward=args.measure,
                               bytes_per_elem=args.bytes, batch=args.batch)
    if args.format == "json":
        print(report.to_json(indent=2))
    elif args.format == "csv":
        print(report.to_csv(), end="")
    else:
        print(report.to_table())
        if args.measure:
            print(f"delta: {report.deltas['flops_forward']} (FLOPs)")
            print(f"delta: {report.deltas['kv_bytes']} (cache bytes)")
    return 0


def route_stats(model: LanguageModel, tokens: np.ndarray, seq_len: int) -> dict:
    """Route held-out tokens without learning; histogram, CV and set entropy per MoE layer."""
    k = model.cfg.experts.top_k
    hist = [np.zeros(r.n_routed, dtype=np.int64) for r in model.routers]
    chosen: list[list[np.ndarray]] = [[] for _ in model.routers]
    model.eval()
    n_tokens = 0
    with no_grad():
        for s in range(0, len(tokens), seq_len):
            window = tokens[s:s + seq_len]
            model.forward(window)
            n_tokens += len(window)
            for i, d in enumerate(model.last_routing):
                hist[i] += np.bincount(d.indices.ravel(), minlength=hist[i].size)
                chosen[i].append(d.indices)
    layers = []
    for i, h in enumerate(hist):
        total = int(h.sum())
        layers.append({
            "layer": i,
            "histogram": h.tolist(),
            "slots": total,
            "cv": load_cv(h / total) if total else None,
            "combination_entropy_bits": combination_entropy(np.concatenate(chosen[i])) if chosen[i] else 0.0,
        })
    return {
        "tokens": n_tokens,
        "top_k": k,
        "routing_combinations": routing_combinations(model.cfg.experts.n_routed, k),
        "layers": layers,
    }


def cmd_route_stats(args) -> int:
    model = _load_model(args.ckpt)
    if model.cfg.ffn != "moe":
        raise UsageError(f"{args.ckpt}: model has no MoE layers")
    try:
        raw = Path(args.data).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read data {args.data}: {exc}") from exc
    tokens = np.asarray(ByteTokenizer().encode(raw), dtype=np.int64)
    if args.val_fraction:
        tokens = Corpus(tokens, args.val_fraction).val
    if len(tokens) == 0:
        raise UsageError(f"{args.data}: no tokens to route")
    seq_len = min(args.seq_len or model.cfg.max_seq, model.cfg.max_seq)
    print(json.dumps(route_stats(model, tokens, seq_len), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moemla", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--corpus")
    p.add_argument("--sweep", help="key=v1,v2,... e.g. model.latent_dim=64,32,16")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="continue a prompt from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--greedy", action="store_true")
    group.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-cache", action="store_true", help="recompute the full prefix every step")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="closed-form cost report, optionally reconciled")
    p.add_argument("--config", required=True)
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--format", choices=("json", "table", "csv"), default="table")
    p.add_argument("--measure", action="store_true", help="run an instrumented forward pass")
    p.add_argument("--batch", type=int, default=1, help="batch size for cache byte accounting")
    p.add_argument("--bytes", type=int, choices=(1, 2, 4, 8), help="bytes per cached element")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("route-stats", help="per-layer expert load statistics on held-out text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="route only the trailing fraction of the data")
    p.set_defaults(func=cmd_route_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DecodeError, CacheError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
