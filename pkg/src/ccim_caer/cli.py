"""Command-line entry point: ``ccim-caer <subcommand> ...``.

Exit status is 0 on success, 2 for usage or validation errors and 1 for
unexpected runtime faults. Every output location receives a run manifest.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .confounder_dictionary import (
    N_PRESETS,
    build_dictionary,
    deserialize_dictionary,
    random_dictionary,
    serialize_dictionary,
)
from .errors import CcimError, ContractError, GenerationError
from .model_training import (
    VARIANTS,
    ModelConfig,
    evaluate,
    joint_features,
    parse_variants,
    run_ablation,
    state_from_json,
    state_to_json,
    train,
)
from .synthetic_caer import (
    GeneratorConfig,
    audit_to_csv,
    bias_audit,
    context_features,
    generate,
    read_dataset,
    read_fingerprint,
    read_split,
    write_dataset,
)


class UsageError(Exception):
    """Bad flag values detected after argument parsing."""


# ------------------------------------------------------------------ helpers

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_manifest(path: Path, command: str, args: argparse.Namespace, inputs, outputs,
                    started: float, extra: dict | None = None) -> None:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    doc = {
        "tool": "ccim-caer",
        "version": __version__,
        "subcommand": command,
        "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
        "seed": flags.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    if extra:
        doc.update(extra)
    _atomic_write(path, json.dumps(doc, indent=2) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value) -> str:
    return repr(float(value))


def _load_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _parse_seeds(text: str) -> list[int]:
    parts = [p for p in text.split(",") if p.strip()]
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"--seeds expects a count or a comma list of integers, got {text!r}") from exc
    if len(values) == 1:
        if values[0] < 1:
            raise UsageError("--seeds count must be >= 1")
        return list(range(values[0]))
    return values


def _parse_n(text: str) -> int:
    if text.lower() in N_PRESETS:
        return N_PRESETS[text.lower()]
    try:
        return int(text)
    except ValueError as exc:
        raise UsageError(f"--n must be an integer or one of {', '.join(N_PRESETS)}, got {text!r}") from exc


def _model_config(path: Path | None, seed: int | None) -> ModelConfig:
    doc = _load_json(path, "model config") if path is not None else {}
    if seed is not None:
        doc["seed"] = seed
    return ModelConfig.from_dict(doc)


def _read_features(path: Path, mask: bool) -> np.ndarray:
    """Feature matrix from a dataset directory, a dataset CSV, or a plain numeric CSV."""
    if path.is_dir():
        train_data, _ = read_dataset(path)
        return context_features(train_data, mask_subject=mask)
    if not path.is_file():
        raise UsageError(f"features file not found: {path}")
    with path.open(newline="") as fh:
        first = next(csv.reader(fh), None)
    if first is None:
        raise UsageError(f"features file {path} is empty")
    if first[:3] == ["split", "label", "context_id"]:
        config, seed, fp = read_fingerprint(path.parent)
        return context_features(read_split(path, config, seed, fp), mask_subject=mask)
    try:
        [float(v) for v in first]
        skip = 0
    except ValueError:
        skip = 1
    try:
        x = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"features file {path} is not numeric CSV: {exc}") from exc
    if x.size == 0:
        raise UsageError(f"features file {path} has no rows")
    return x


def _metrics_header(n_classes: int) -> list[str]:
    return ["split", "accuracy", "map"] + [f"ap_{c}" for c in range(n_classes)]


def _metrics_row(split: str, report) -> list[str]:
    return [split, _fmt(report.accuracy), _fmt(report.map)] + [_fmt(v) for v in report.per_class_ap]


def _check_dims(state, data, dictionary) -> None:
    p = state.params
    if p["fs_W1"].shape[1] != data.subjects.shape[1]:
        raise UsageError(f"subject dimension mismatch: model expects {p['fs_W1'].shape[1]}, "
                         f"data has {data.subjects.shape[1]}")
    if p["fc_W1"].shape[1] != data.contexts.shape[1]:
        raise UsageError(f"context dimension mismatch: model expects {p['fc_W1'].shape[1]}, "
                         f"data has {data.contexts.shape[1]}")
    if p["cls"].shape[0] != data.n_emotions:
        raise UsageError(f"class count mismatch: model has {p['cls'].shape[0]}, data has {data.n_emotions}")
    if state.ccim is not None:
        d = state.ccim.W_g.shape[1]
        if dictionary is None:
            raise UsageError("this model uses CCIM; pass --dict")
        if dictionary.d != d:
            raise UsageError(f"dictionary dimension mismatch: model expects {d}, dictionary has {dictionary.d}")


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    started = time.time()
    doc = _load_json(args.config, "generator config") if args.config else {}
    config = GeneratorConfig.from_dict(doc)
    train_data, test_data = generate(config, args.seed)
    write_dataset(train_data, test_data, args.out)
    outputs = [args.out / "train.csv", args.out / "test.csv", args.out / "fingerprint.json"]
    _write_manifest(args.out / "manifest.json", "gen-data", args, [args.config] if args.config else [],
                    outputs, started)


def cmd_build_dict(args) -> None:
    started = time.time()
    n = _parse_n(args.n)
    x = _read_features(args.features, mask=not args.no_mask_input)
    if n < 1 or n > x.shape[0]:
        raise UsageError(f"--n {n} must lie in [1, {x.shape[0]}] (the number of feature rows)")
    if args.random:
        dictionary = random_dictionary(n, x.shape[1], args.seed, args.random_scale)
    else:
        dictionary = build_dictionary(x, n, args.pca_dims, args.seed, restarts=args.restarts)
    serialize_dictionary(dictionary, args.out)
    deserialize_dictionary(args.out)
    _write_manifest(args.out.with_name(args.out.stem + ".manifest.json"), "build-dict", args,
                    [args.features], [args.out], started,
                    {"dictionary_fingerprint": dictionary.fingerprint()})


def cmd_train(args) -> None:
    started = time.time()
    train_data, test_data = read_dataset(args.data)
    config = _model_config(args.model, args.seed)
    dictionary = deserialize_dictionary(args.dict) if args.dict else None
    if config.use_ccim and dictionary is None:
        raise UsageError("model config sets use_ccim; pass --dict")
    if not config.use_ccim:
        dictionary = None
    if dictionary is not None and dictionary.d != train_data.contexts.shape[1]:
        raise UsageError(f"dictionary dimension {dictionary.d} does not match "
                         f"context dimension {train_data.contexts.shape[1]}")
    state = train(config, train_data, dictionary)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "checkpoint.json", state_to_json(state))
    _atomic_write(out / "loss_curve.csv",
                  _csv_text(["epoch", "loss"], [[i + 1, _fmt(v)] for i, v in enumerate(state.loss_curve)]))
    rows = [_metrics_row(s, evaluate(state, d, dictionary)) for s, d in (("train", train_data), ("test", test_data))]
    _atomic_write(out / "metrics.csv", _csv_text(_metrics_header(train_data.n_emotions), rows))
    inputs = [args.data] + ([args.dict] if args.dict else []) + ([args.model] if args.model else [])
    _write_manifest(out / "manifest.json", "train", args, inputs,
                    [out / "checkpoint.json", out / "metrics.csv", out / "loss_curve.csv"], started)


def cmd_eval(args) -> None:
    started = time.time()
    train_data, test_data = read_dataset(args.data)
    ckpt = args.checkpoint
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    state = state_from_json(ckpt.read_text())
    dictionary = deserialize_dictionary(args.dict) if args.dict else None
    if state.ccim is not None and dictionary is not None \
            and dictionary.fingerprint() != state.dictionary_fingerprint:
        raise UsageError("dictionary fingerprint differs from the one the checkpoint was trained with")
    splits = {"train": train_data, "test": test_data}
    chosen = ["train", "test"] if args.split == "both" else [args.split]
    for name in chosen:
        _check_dims(state, splits[name], dictionary)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rows = [_metrics_row(s, evaluate(state, splits[s], dictionary)) for s in chosen]
    _atomic_write(out / "metrics.csv", _csv_text(_metrics_header(test_data.n_emotions), rows))
    outputs = [out / "metrics.csv"]
    if args.export_features:
        for s in chosen:
            data = splits[s]
            h, feat = joint_features(state, data.subjects, data.contexts, dictionary)
            header = (["label", "context_id"] + [f"h_{i}" for i in range(h.shape[1])]
                      + [f"f_{i}" for i in range(feat.shape[1])])
            rows = [[int(data.labels[i]), int(data.context_ids[i])] + [_fmt(v) for v in h[i]]
                    + [_fmt(v) for v in feat[i]] for i in range(len(data))]
            path = out / f"features_{s}.csv"
            _atomic_write(path, _csv_text(header, rows))
            outputs.append(path)
    inputs = [args.data, ckpt] + ([args.dict] if args.dict else [])
    _write_manifest(out / "manifest.json", "eval", args, inputs, outputs, started)


def cmd_audit(args) -> None:
    started = time.time()
    train_data, test_data = read_dataset(args.data)
    data = train_data if args.split == "train" else test_data
    if not 0 <= args.emotion < data.n_emotions:
        raise UsageError(f"--emotion must lie in [0, {data.n_emotions}), got {args.emotion}")
    report = bias_audit(data, args.emotion)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "audit.csv", audit_to_csv(report))
    summary = dict(report.summary(), split=args.split)
    _atomic_write(out / "audit.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out / "manifest.json", "audit", args, [args.data],
                    [out / "audit.csv", out / "audit.json"], started)


def _write_ablation(out: Path, result, label_fn, n_classes: int) -> list[Path]:
    wide_header = ["variant", "n", "seed", "accuracy", "map"] + [f"ap_{c}" for c in range(n_classes)]
    wide, long_rows = [], []
    for row in result.rows:
        r = row.report
        wide.append([row.variant, row.n, row.seed, _fmt(r.accuracy), _fmt(r.map)]
                    + [_fmt(v) for v in r.per_class_ap])
        key = label_fn(row)
        long_rows.append([key, row.seed, "accuracy", _fmt(r.accuracy)])
        long_rows.append([key, row.seed, "map", _fmt(r.map)])
        long_rows.extend([key, row.seed, f"ap_{c}", _fmt(v)] for c, v in enumerate(r.per_class_ap))
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "runs.csv", _csv_text(wide_header, wide))
    _atomic_write(out / "results.csv", _csv_text(["variant_or_N", "seed", "metric", "value"], long_rows))
    return [out / "runs.csv", out / "results.csv"]


def cmd_ablate(args) -> None:
    started = time.time()
    variants = [v.strip() for v in args.variants.split(";" if ";" in args.variants else ",") if v.strip()]
    try:
        parse_variants(variants)
    except CcimError as exc:
        raise UsageError(str(exc)) from exc
    train_data, test_data = read_dataset(args.data)
    config = _model_config(args.model, None)
    n = _parse_n(args.n)
    result = run_ablation(config, train_data, test_data, variants, _parse_seeds(args.seeds), n,
                          args.pca_dims, args.jobs)
    outputs = _write_ablation(args.out, result, lambda r: r.variant if r.variant != "n_sweep" else f"N={r.n}",
                              train_data.n_emotions)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _write_manifest(args.out / "manifest.json", "ablate", args,
                    [args.data] + ([args.model] if args.model else []), outputs, started,
                    {"warnings": result.warnings})


def cmd_sweep_n(args) -> None:
    started = time.time()
    try:
        sizes = [int(t) for t in args.n_list.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--n-list expects comma-separated integers, got {args.n_list!r}") from exc
    if not sizes or any(s < 1 for s in sizes):
        raise UsageError("--n-list needs at least one positive size")
    train_data, test_data = read_dataset(args.data)
    if max(sizes) > len(train_data):
        raise UsageError(f"dictionary size {max(sizes)} exceeds the {len(train_data)} training samples")
    config = _model_config(args.model, None)
    result = run_ablation(config, train_data, test_data, [("n_sweep", sizes)], _parse_seeds(args.seeds),
                          d_p=args.pca_dims, jobs=args.jobs)
    outputs = _write_ablation(args.out, result, lambda r: str(r.n), train_data.n_emotions)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _write_manifest(args.out / "manifest.json", "sweep-n", args,
                    [args.data] + ([args.model] if args.model else []), outputs, started,
                    {"warnings": result.warnings})


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccim-caer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic context-biased dataset")
    p.add_argument("--config", type=Path, help="generator config JSON (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-dict", help="build a confounder dictionary from context features")
    p.add_argument("--features", type=Path, required=True,
                   help="numeric CSV, dataset train.csv, or dataset directory")
    p.add_argument("--n", default="8", help=f"dictionary size or preset ({', '.join(N_PRESETS)})")
    p.add_argument("--pca-dims", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--random", action="store_true", help="random prototypes instead of clustering")
    p.add_argument("--random-scale", type=float, default=1.0)
    p.add_argument("--no-mask-input", action="store_true",
                   help="keep subject leakage in dataset context features")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_build_dict)

    p = sub.add_parser("train", help="train a baseline or CCIM model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--dict", type=Path)
    p.add_argument("--model", type=Path, help="model config JSON")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dict", type=Path)
    p.add_argument("--split", choices=("train", "test", "both"), default="test")
    p.add_argument("--export-features", action="store_true",
                   help="dump fused and classifier-input features with labels")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="per-context conditional entropy of one emotion")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--emotion", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("ablate", help="train ablation variants side by side")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variants", required=True,
                   help=f"comma list from {', '.join(VARIANTS)}; use ';' to separate when "
                        "including n_sweep:<list>")
    p.add_argument("--seeds", default="1", help="count or comma list")
    p.add_argument("--n", default="8")
    p.add_argument("--pca-dims", type=int, default=None)
    p.add_argument("--model", type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-n", help="vary the dictionary size")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n-list", required=True)
    p.add_argument("--seeds", default="1", help="count or comma list")
    p.add_argument("--pca-dims", type=int, default=None)
    p.add_argument("--model", type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep_n)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (UsageError, CcimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        # contract and generation failures are runtime faults, not bad input
        return 1 if isinstance(exc, (ContractError, GenerationError)) else 2
    except Exception as exc:  # noqa: BLE001
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
