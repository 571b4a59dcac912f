"""Command-line front end.

Subcommands: salience, mask, train, eval, report, overhead. Experiment specs
are TOML (JSON accepted) with [model], [data], [train], and an optional
[matrix] section whose lists expand into a cross-product of runs. Every
expanded run gets a deterministic id: the hash of its canonicalized config,
so reordering keys in the spec file never changes the id.

Exit codes: 0 success, 2 config error, 3 runtime divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from speft import adapter as sparse
from speft import data as data_mod
from speft import fileio, masking, models, salience, trainer

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _load_spec_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"spec file not found: {p}", code=4)
    raw = p.read_bytes()
    if p.suffix.lower() == ".json":
        return json.loads(raw.decode("utf-8"))
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError:
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError:
            raise CliError(f"{p}: neither valid TOML nor JSON") from None


def canonical_run_id(run_spec: dict) -> str:
    blob = json.dumps(run_spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def expand_matrix(spec: dict, seeds_override: int | None = None) -> list[dict]:
    """Cross-product expansion of the [matrix] section over train fields."""
    base_train = dict(spec.get("train", {}))
    matrix = {k: list(v) for k, v in spec.get("matrix", {}).items()}
    if seeds_override is not None:
        matrix["seed"] = list(range(seeds_override))
    for key in matrix:
        if key not in trainer.TrainConfig.__dataclass_fields__:
            raise CliError(f"matrix key {key!r} is not a train-config field")
    runs = []
    keys = sorted(matrix)
    combos = itertools.product(*(matrix[k] for k in keys)) if keys else [()]
    for combo in combos:
        train = dict(base_train)
        train.update(dict(zip(keys, combo)))
        runs.append(
            {
                "model": dict(spec.get("model", {})),
                "data": dict(spec.get("data", {})),
                "train": train,
            }
        )
    return runs


def _train_config(train_spec: dict) -> trainer.TrainConfig:
    fields = trainer.TrainConfig.__dataclass_fields__
    unknown = [k for k in train_spec if k not in fields]
    if unknown:
        raise CliError(f"unknown train fields: {unknown}")
    cfg = trainer.TrainConfig(**train_spec)
    if isinstance(cfg.betas, list):
        cfg.betas = tuple(cfg.betas)
    cfg.validate()
    return cfg


def _build_from_run_spec(run_spec: dict):
    model_cfg = models.ModelConfig.from_dict(run_spec.get("model", {}))
    model = models.build_model(model_cfg)
    dataset = data_mod.dataset_from_spec(run_spec.get("data", {}))
    config = _train_config(run_spec.get("train", {}))
    return model, dataset, config


def _run_one(run_spec: dict, out_root: str) -> dict:
    """Execute one expanded run and write its run directory."""
    run_id = canonical_run_id(run_spec)
    run_dir = Path(out_root) / f"run-{run_id}"
    run_dir.mkdir(parents=True, exist_ok=True)
    model, dataset, config = _build_from_run_spec(run_spec)
    result = trainer.run(config, model, dataset)

    result.runlog.to_jsonl(run_dir / "runlog.jsonl")
    fileio.save_checkpoint(
        run_dir / "checkpoint.bin",
        result.final_arrays,
        model.config.to_dict(),
        getattr(model, "build_seed", model.config.seed),
    )
    if result.delta is not None:
        masking.save_mask(run_dir / "mask.bin", result.mask)
        sparse.save_adapter_file(run_dir / "adapter.bin", result.delta)

    report = {
        "run_id": run_id,
        "config": {
            "model": run_spec.get("model", {}),
            "data": {k: v for k, v in run_spec.get("data", {}).items()},
            "train": config.to_dict(),
        },
        "final_metrics": result.runlog.final_eval(),
        "trainable_count": result.runlog.trainable_count,
        "refresh_steps": result.runlog.refresh_steps(),
        "wall_clock": result.runlog.wall_clock,
        "final_eval_step": config.steps,
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (run_dir / "manifest.json").write_text(
        json.dumps({"run_id": run_id, "spec": run_spec}, indent=2, sort_keys=True)
    )
    return report


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_salience(args) -> int:
    model = models.load_model(args.checkpoint)
    config = salience.SalienceConfig(
        metric=args.metric,
        estimation_batches=args.batches,
        batch_size=args.batch_size,
        seed=args.seed,
        name_filter=args.filter,
    )
    config.validate()
    batches = None
    if args.metric not in salience.DATA_FREE_METRICS:
        if args.data is None:
            raise CliError(f"metric {args.metric!r} requires data (pass --data)")
        spec = _load_spec_file(args.data)
        dataset = data_mod.dataset_from_spec(spec.get("data", spec))
        batches = salience.estimation_batches(dataset, config)
    scores = salience.compute_salience(model, config, batches)
    salience.save_scores(args.out, scores)
    print(f"wrote {args.out}: metric={scores.metric} layers={len(scores.layers)} batches={scores.batches_used}")
    return 0


def cmd_mask(args) -> int:
    scores = salience.load_scores(args.scores)
    flat = scores.flat()
    total = sum(a.size for a in flat.values())
    if args.scope == "global" and masking.budget(args.rho, total) == 0:
        raise CliError(f"budget rounds to zero: floor({args.rho} * {total}) = 0")
    build = masking.build_global_mask if args.scope == "global" else masking.build_local_mask
    mask = build(flat, args.rho, metric=scores.metric)
    if mask.nnz == 0:
        raise CliError(f"budget rounds to zero in every layer at rho={args.rho}")
    masking.save_mask(args.out, mask)
    print(f"wrote {args.out}: scope={mask.scope} rho={mask.rho} nnz={mask.nnz}")
    return 0


def cmd_train(args) -> int:
    spec = _load_spec_file(args.spec)
    out_root = args.out or spec.get("output", {}).get("dir", "runs")
    runs = expand_matrix(spec, seeds_override=args.seeds)
    workers = int(os.environ.get("SPEFT_THREADS", "1") or "1")
    reports: list[dict] = []
    if workers > 1 and len(runs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(runs))) as pool:
            reports = list(pool.map(_run_one, runs, [out_root] * len(runs)))
    else:
        for run_spec in runs:
            reports.append(_run_one(run_spec, out_root))

    manifest = {
        "runs": [
            {"run_id": r["run_id"], "dir": f"run-{r['run_id']}", "train": r["config"]["train"]}
            for r in reports
        ]
    }
    Path(out_root).mkdir(parents=True, exist_ok=True)
    (Path(out_root) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for r in reports:
        metrics = r["final_metrics"] or {}
        shown = " ".join(f"{k}={v:.6g}" for k, v in metrics.items())
        print(f"run {r['run_id']}: trainable={r['trainable_count']} {shown}")
    print(f"{len(reports)} run(s) under {out_root}")
    return 0


def cmd_eval(args) -> int:
    model = models.load_model(args.checkpoint)
    spec = _load_spec_file(args.data)
    dataset = data_mod.dataset_from_spec(spec.get("data", spec))
    metrics = trainer.evaluate(model, dataset)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _group_key(report: dict) -> str:
    train = dict(report["config"]["train"])
    train.pop("seed", None)
    return json.dumps(train, sort_keys=True)


def cmd_report(args) -> int:
    reports = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise CliError(f"missing run directory or report: {path}", code=4)
        reports.append(json.loads(path.read_text()))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for r in reports:
        train = r["config"]["train"]
        metrics = r["final_metrics"] or {}
        rows.append(
            {
                "run_id": r["run_id"],
                "method": train.get("method"),
                "metric": train.get("metric"),
                "scope": train.get("scope"),
                "interval": train.get("interval"),
                "rho": train.get("rho"),
                "seed": train.get("seed"),
                "trainable": r["trainable_count"],
                "eval_step": r.get("final_eval_step"),
                **{f"final_{k}": v for k, v in metrics.items()},
            }
        )
    fields = sorted({k for row in rows for k in row})
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)

    # Seed-grouped aggregation: mean and std per cell.
    groups: dict[str, list[dict]] = {}
    for r in reports:
        groups.setdefault(_group_key(r), []).append(r)
    aggregated = []
    for key, members in sorted(groups.items()):
        metric_names = sorted({k for m in members for k in (m["final_metrics"] or {})})
        cell = {
            "train": json.loads(key),
            "n_runs": len(members),
            "run_ids": [m["run_id"] for m in members],
        }
        for name in metric_names:
            vals = [m["final_metrics"][name] for m in members if name in (m["final_metrics"] or {})]
            cell[f"{name}_mean"] = float(np.mean(vals))
            cell[f"{name}_std"] = float(np.std(vals))
        aggregated.append(cell)

    summary = {"runs": rows, "cells": aggregated}
    if len(aggregated) == 2:
        a, b = aggregated
        deltas = {}
        for key in a:
            if key.endswith("_mean") and key in b:
                deltas[key.replace("_mean", "_delta")] = b[key] - a[key]
        summary["comparison"] = {"baseline": a["run_ids"], "other": b["run_ids"], "delta": deltas}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    # Plot data for budget sweeps: (rho, metric, score) sorted by rho.
    triples = []
    for r in reports:
        train = r["config"]["train"]
        if train.get("rho") is None:
            continue
        metrics = r["final_metrics"] or {}
        score = metrics.get("accuracy", metrics.get("loss"))
        triples.append((train["rho"], train.get("metric"), score, r["run_id"]))
    triples.sort(key=lambda t: (t[0], str(t[1])))
    with open(out_dir / "plot_data.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "metric", "score", "run_id"])
        writer.writerows(triples)

    print(f"report over {len(reports)} run(s) -> {out_dir}")
    return 0


def cmd_overhead(args) -> int:
    spec = _load_spec_file(args.spec)
    model_cfg = models.ModelConfig.from_dict(spec.get("model", {}))
    model = models.build_model(model_cfg)
    config = _train_config(spec.get("train", {}))
    report = trainer.overhead_report(config, model)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point.
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("salience", help="compute salience scores for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset spec file (required for data-aware metrics)")
    p.add_argument("--batches", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter", help="adaptable-layer name pattern")
    p.set_defaults(func=cmd_salience)

    p = sub.add_parser("mask", help="build a sparsity mask from a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--scope", choices=["global", "local"], default="global")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="run an experiment spec (expands [matrix])")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", help="output root (default: spec [output].dir or ./runs)")
    p.add_argument("--seeds", type=int, help="replicate each cell over seeds 0..N-1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize finished run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("overhead", help="estimation-cost and storage accounting")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_overhead)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except trainer.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (
        trainer.ConfigError,
        salience.SalienceError,
        masking.MaskError,
        models.ModelConfigError,
        sparse.AdapterError,
        data_mod.DataError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (fileio.FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
