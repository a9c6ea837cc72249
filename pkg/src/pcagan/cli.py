"""Command-line front end: dataset generation, single runs, evaluation,
and the M/K/d sweeps, all emitting machine-readable CSV/JSON artifacts.

Configuration is a JSON document with three sections:

    {
      "problem": {"d", "chain_d_max", "prior_seed", "noise_var",
                   "mask_convention"},
      "data":    {"train", "val", "test", "seed"},
      "train":   { ... any TrainConfig field ... }
    }

A profile (--profile desk|paper) supplies the base document, --config
overlays a file on top, and --set key=value (dotted keys, JSON-parsed
values) overlays individual entries.  Unknown keys anywhere are usage
errors (exit 2).

The sweep writes results.csv with the stable schema

    axis,axis_value,mode,seed,mean_w2,w2_per_d,trace_ratio,wall_seconds

one row per (axis value, mode, seed); mean_w2 is the run's best validation
W2 and trace_ratio is taken at that epoch.  wall_seconds is wall-clock
timing and is the one column exempt from determinism guarantees.
manifest.json records the resolved configuration next to it.  Exit codes:
0 success, 2 usage/config error, 3 at least one run diverged (partial CSV
is kept).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datakit import generate_dataset, load_dataset, save_dataset
from .errors import InvalidArgumentError, NumericalFailureError, PcaGanError
from .evaluation import evaluate_model
from .gaussian_world import (
    ConditionalOracle,
    even_masked_model,
    make_prior_chain,
    measurement_to_dict,
    prior_to_dict,
)
from .netcore import AffineGenerator, checkpoint_from_dict
from .rng import ALGORITHM_ID, stream
from .trainer import TrainConfig, train

RESULTS_COLUMNS = (
    "axis", "axis_value", "mode", "seed", "mean_w2", "w2_per_d", "trace_ratio",
    "wall_seconds",
)

SWEEP_AXES = ("M", "K", "d")

OUT_ROOT_ENV = "PCAGAN_OUT_ROOT"

PROFILES = {
    "desk": {
        "problem": {
            "d": 40, "chain_d_max": 40, "prior_seed": 0, "noise_var": 0.001,
            "mask_convention": "zero_even",
        },
        "data": {"train": 10000, "val": 2000, "test": 1000, "seed": 0},
        "train": {"epochs": 40, "e_evec": 8, "e_eval": 16},
        "sweep_values": {"d": [10, 20, 40], "K": [10, 20, 40], "M": [25, 100, 400]},
        "seeds": [0, 1, 2, 3, 4],
    },
    "paper": {
        "problem": {
            "d": 100, "chain_d_max": 100, "prior_seed": 0, "noise_var": 0.001,
            "mask_convention": "zero_even",
        },
        "data": {"train": 70000, "val": 20000, "test": 10000, "seed": 0},
        "train": {"epochs": 100, "e_evec": 10, "e_eval": 35},
        "sweep_values": {
            "d": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
            "K": [25, 50, 100],
            "M": [10, 100, 1000],
        },
        "seeds": [0, 1, 2, 3, 4],
    },
}

_PROBLEM_KEYS = {"d", "chain_d_max", "prior_seed", "noise_var", "mask_convention"}
_DATA_KEYS = {"train", "val", "test", "seed"}


class UsageError(PcaGanError):
    """Bad flags or configuration; maps to exit code 2."""


@dataclass
class ExperimentSpec:
    """Everything one CLI invocation resolved to."""

    command: str  # gen-data | train | eval | sweep
    config: dict
    out_dir: Path
    sweep_axis: str | None = None
    values: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    modes: list[str] = field(default_factory=list)
    jobs: int = 1
    resume: bool = False
    profile: str = "desk"
    checkpoint: Path | None = None
    data_path: Path | None = None
    per_y_csv: bool = False


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError("--set expects key=value, got %r" % assignment)
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise UsageError("unknown config section %r in --set %s" % (part, key))
        node = node[part]
    node[parts[-1]] = value


def _validate_config(config: dict) -> dict:
    known_sections = {"problem", "data", "train", "format_version"}
    unknown = set(config) - known_sections
    if unknown:
        raise UsageError("unknown config sections: %s" % sorted(unknown))
    problem = config.get("problem", {})
    bad = set(problem) - _PROBLEM_KEYS
    if bad:
        raise UsageError("unknown problem keys: %s" % sorted(bad))
    data = config.get("data", {})
    bad = set(data) - _DATA_KEYS
    if bad:
        raise UsageError("unknown data keys: %s" % sorted(bad))
    try:
        TrainConfig.from_dict(config.get("train", {}))
    except (InvalidArgumentError, TypeError) as exc:
        raise UsageError("bad train config: %s" % exc) from exc
    return config


def _resolve_config(args) -> dict:
    profile = PROFILES.get(args.profile)
    if profile is None:
        raise UsageError("unknown profile %r" % args.profile)
    config = {
        "problem": copy.deepcopy(profile["problem"]),
        "data": copy.deepcopy(profile["data"]),
        "train": copy.deepcopy(profile["train"]),
    }
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = _deep_merge(config, json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError("cannot read config %s: %s" % (args.config, exc)) from exc
    for assignment in args.set or []:
        _apply_set(config, assignment)
    return _validate_config(config)


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV, "pcagan-out")
    return Path(root) / args.command


def _chain_d_max(problem: dict, needed: int) -> int:
    explicit = problem.get("chain_d_max")
    if explicit:
        if explicit < needed:
            raise UsageError(
                "chain_d_max=%d is smaller than required d=%d" % (explicit, needed)
            )
        return int(explicit)
    return ((needed + 9) // 10) * 10


def _prior_for(problem: dict, d: int, chain_d_max: int):
    if d % 10 != 0:
        raise UsageError("problem d must be a multiple of 10, got %d" % d)
    chain = make_prior_chain(chain_d_max, int(problem.get("prior_seed", 0)))
    prior = next(p for p in chain if p.dim == d)
    mm = even_masked_model(
        d, float(problem.get("noise_var", 0.001)),
        problem.get("mask_convention", "zero_even"),
    )
    return prior, mm


def _dataset_path(data_dir: Path, d: int, data_seed: int) -> Path:
    return data_dir / ("d%03d_s%d.bin" % (d, data_seed))


def _ensure_dataset(config: dict, d: int, chain_d_max: int, data_dir: Path):
    """Generate (or reuse) the dataset for dimension d; returns the handle."""
    problem, data_cfg = config["problem"], config["data"]
    prior, mm = _prior_for(problem, d, chain_d_max)
    path = _dataset_path(data_dir, d, int(data_cfg["seed"]))
    if path.exists():
        return load_dataset(path, expected_prior=prior, expected_mm=mm)
    counts = (int(data_cfg["train"]), int(data_cfg["val"]), int(data_cfg["test"]))
    handle = generate_dataset(prior, mm, counts, int(data_cfg["seed"]))
    data_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(handle, path)
    return handle


def _train_config(config: dict, mode: str | None = None, seed: int | None = None,
                  axis: str | None = None, value: int | None = None) -> TrainConfig:
    doc = dict(config["train"])
    if mode is not None:
        doc["mode"] = mode
    if seed is not None:
        doc["seed"] = int(seed)
    if axis == "M":
        doc["m_lazy"] = int(value)
    elif axis == "K":
        doc["k"] = int(value)
    return TrainConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(spec: ExperimentSpec) -> int:
    config = spec.config
    d = int(config["problem"]["d"])
    chain_d_max = _chain_d_max(config["problem"], d)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    handle = _ensure_dataset(config, d, chain_d_max, spec.out_dir)
    with open(spec.out_dir / ("prior_d%03d.json" % d), "w", encoding="utf-8") as fh:
        json.dump(
            {"prior": prior_to_dict(handle.prior), "mm": measurement_to_dict(handle.mm)},
            fh,
        )
    print("dataset at %s (train=%d val=%d test=%d d=%d)" % (
        _dataset_path(spec.out_dir, d, handle.seed), *handle.counts, d,
    ))
    return 0


def _run_one(config: dict, handle, mode: str | None, seed: int | None,
             axis: str | None, value: int | None, run_dir: Path) -> dict:
    cfg = _train_config(config, mode, seed, axis, value)
    t0 = time.perf_counter()
    record = train(cfg, handle)
    wall = time.perf_counter() - t0
    run_dir.mkdir(parents=True, exist_ok=True)
    record.to_csv(run_dir / "record.csv")
    ckpt_path = run_dir / "checkpoint.json"
    with open(ckpt_path, "w", encoding="utf-8") as fh:
        json.dump(record.checkpoint, fh)
    record.write_manifest(run_dir / "manifest.json", str(ckpt_path))
    best = record.rows[record.best_epoch]
    return {
        "mean_w2": record.best_w2,
        "w2_per_d": record.best_w2 / handle.dim,
        "trace_ratio": best.trace_ratio,
        "wall_seconds": wall,
        "diverged": record.diverged,
        "run_dir": str(run_dir),
    }


def cmd_train(spec: ExperimentSpec) -> int:
    config = spec.config
    d = int(config["problem"]["d"])
    chain_d_max = _chain_d_max(config["problem"], d)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    if spec.data_path:
        handle = load_dataset(spec.data_path)
    else:
        handle = _ensure_dataset(config, d, chain_d_max, spec.out_dir / "data")
    result = _run_one(config, handle, None, None, None, None, spec.out_dir)
    print("best validation W2 %.6g (W2/d %.6g) at %s" % (
        result["mean_w2"], result["w2_per_d"], result["run_dir"],
    ))
    return 3 if result["diverged"] else 0


def cmd_eval(spec: ExperimentSpec) -> int:
    config = spec.config
    d = int(config["problem"]["d"])
    chain_d_max = _chain_d_max(config["problem"], d)
    if spec.checkpoint is None:
        raise UsageError("eval requires --checkpoint")
    with open(spec.checkpoint, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "run_checkpoint":
        raise UsageError("not a run checkpoint: %s" % spec.checkpoint)
    params, _, _ = checkpoint_from_dict(doc["generator"])
    gen = AffineGenerator(d=int(doc["d"]), d_z=int(doc["d_z"]), params=params)
    if gen.d != d:
        raise UsageError("checkpoint dimension %d != config d %d" % (gen.d, d))
    if spec.data_path:
        handle = load_dataset(spec.data_path)
    else:
        handle = _ensure_dataset(config, d, chain_d_max, spec.out_dir / "data")
    cfg = _train_config(config).resolved(d)
    oracle = ConditionalOracle(handle.prior, handle.mm)
    report = evaluate_model(
        gen, oracle, handle.test.x, handle.test.y, cfg.k,
        samples_per_dim=cfg.val_samples_per_dim,
        rng=stream(cfg.seed, "eval", "test"),
    )
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(spec.out_dir / "eval.json")
    if spec.per_y_csv:
        with open(spec.out_dir / "w2_per_y.csv", "w", encoding="utf-8") as fh:
            fh.write("index,w2\n")
            for i, v in enumerate(report.w2_per_y):
                fh.write("%d,%r\n" % (i, float(v)))
    print("mean W2 %.6g over %d test points -> %s" % (
        report.mean_w2, len(report.w2_per_y), spec.out_dir / "eval.json",
    ))
    return 0


def _sweep_point(payload: dict) -> dict:
    """Worker entry: one (axis value, mode, seed) training run."""
    config = payload["config"]
    axis, value = payload["axis"], payload["value"]
    d = value if axis == "d" else int(config["problem"]["d"])
    handle = load_dataset(payload["dataset_path"])
    run_dir = Path(payload["run_dir"])
    try:
        result = _run_one(config, handle, payload["mode"], payload["seed"], axis,
                          value, run_dir)
    except NumericalFailureError as exc:
        return {**payload, "axis_value": value, "status": "failed", "error": str(exc)}
    status = "diverged" if result["diverged"] else "ok"
    return {**payload, "axis_value": value, "status": status, **result}


def cmd_sweep(spec: ExperimentSpec) -> int:
    config = spec.config
    axis = spec.sweep_axis
    if axis not in SWEEP_AXES:
        raise UsageError("--sweep must be one of %s" % (SWEEP_AXES,))
    values = spec.values or PROFILES[spec.profile]["sweep_values"][axis]
    seeds = spec.seeds or PROFILES[spec.profile]["seeds"]
    modes = spec.modes or (["pcaGAN", "rcGAN"] if axis == "d" else ["pcaGAN"])
    for mode in modes:
        if mode not in ("pcaGAN", "rcGAN"):
            raise UsageError("unknown mode %r" % mode)

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = spec.out_dir / "data"
    results_path = spec.out_dir / "results.csv"

    done: set[tuple] = set()
    rows: list[dict] = []
    if spec.resume and results_path.exists():
        rows = _read_results(results_path)
        done = {(r["axis_value"], r["mode"], r["seed"]) for r in rows}

    # datasets are generated serially up front so workers only read
    needed_ds = sorted({v for v in values} if axis == "d" else {int(config["problem"]["d"])})
    chain_d_max = _chain_d_max(config["problem"], max(needed_ds))
    for d in needed_ds:
        _ensure_dataset(config, d, chain_d_max, data_dir)

    points = []
    for value in values:
        for mode in modes:
            for seed in seeds:
                if (value, mode, seed) in done:
                    continue
                d = value if axis == "d" else int(config["problem"]["d"])
                cfg_point = copy.deepcopy(config)
                cfg_point["problem"]["d"] = d
                points.append(
                    {
                        "config": cfg_point,
                        "axis": axis,
                        "value": value,
                        "mode": mode,
                        "seed": seed,
                        "dataset_path": str(
                            _dataset_path(data_dir, d, int(config["data"]["seed"]))
                        ),
                        "run_dir": str(
                            spec.out_dir / "runs" / ("%s%s_%s_seed%d" % (axis, value, mode, seed))
                        ),
                    }
                )

    manifest = {
        "package_version": __version__,
        "rng_algorithm": ALGORITHM_ID,
        "profile": spec.profile,
        "axis": axis,
        "values": list(values),
        "seeds": list(seeds),
        "modes": list(modes),
        "config": config,
        "columns": list(RESULTS_COLUMNS),
    }
    with open(spec.out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)

    any_diverged = False
    if spec.jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            outcomes = list(pool.map(_sweep_point, points))
    else:
        outcomes = []
        for point in points:
            outcomes.append(_sweep_point(point))
            _write_results(results_path, rows + [o for o in outcomes if o["status"] != "failed"])
    for out in outcomes:
        if out["status"] == "failed":
            print("run %s%s %s seed %d failed: %s" % (
                axis, out["value"], out["mode"], out["seed"], out["error"]
            ), file=sys.stderr)
            any_diverged = True
            continue
        if out["status"] == "diverged":
            any_diverged = True
        rows.append(out)
    _write_results(results_path, rows)
    print("wrote %d rows to %s" % (len(rows), results_path))
    return 3 if any_diverged else 0


def _row_key(row: dict) -> tuple:
    return (str(row.get("axis_value", row.get("value"))), str(row["mode"]), int(row["seed"]))


def _write_results(path: Path, rows: list[dict]) -> None:
    ordered = sorted(rows, key=_row_key)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(RESULTS_COLUMNS) + "\n")
        for row in ordered:
            axis_value = row.get("axis_value", row.get("value"))
            fh.write(
                ",".join(
                    [
                        str(row["axis"]),
                        str(axis_value),
                        str(row["mode"]),
                        str(int(row["seed"])),
                        repr(float(row["mean_w2"])),
                        repr(float(row["w2_per_d"])),
                        repr(float(row["trace_ratio"])),
                        repr(float(row["wall_seconds"])),
                    ]
                )
                + "\n"
            )


def _read_results(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != list(RESULTS_COLUMNS):
            raise UsageError("existing results.csv has an incompatible schema")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(RESULTS_COLUMNS):
                continue
            row = dict(zip(RESULTS_COLUMNS, parts))
            row["seed"] = int(row["seed"])
            try:
                row["axis_value"] = int(row["axis_value"])
            except ValueError:
                pass
            for key in ("mean_w2", "w2_per_d", "trace_ratio", "wall_seconds"):
                row[key] = float(row[key])
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcagan",
        description="Train and evaluate posterior samplers on Gaussian linear "
        "inverse problems with exact posteriors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file overlaying the profile")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.beta_pca=0.02")
        p.add_argument("--out", help="output directory (default: $%s/<command>)" % OUT_ROOT_ENV)
        p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
        if name == "sweep":
            p.add_argument("--sweep", required=True, choices=SWEEP_AXES,
                           help="sweep axis")
            p.add_argument("--values", help="comma-separated axis values")
            p.add_argument("--seeds", help="comma-separated seeds")
            p.add_argument("--modes", help="comma-separated modes (pcaGAN,rcGAN)")
            p.add_argument("--jobs", type=int, default=1)
            p.add_argument("--resume", action="store_true",
                           help="skip (axis_value, mode, seed) rows already in results.csv")
        if name in ("train", "eval"):
            p.add_argument("--data", help="dataset container to use instead of generating")
        if name == "eval":
            p.add_argument("--checkpoint", help="run checkpoint JSON to evaluate")
            p.add_argument("--per-y-csv", action="store_true",
                           help="also write per-measurement W2 values")
    return parser


def _parse_int_list(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(tok) for tok in text.split(",") if tok]
    except ValueError as exc:
        raise UsageError("expected comma-separated integers, got %r" % text) from exc


def spec_from_args(args) -> ExperimentSpec:
    config = _resolve_config(args)
    spec = ExperimentSpec(
        command=args.command,
        config=config,
        out_dir=_out_dir(args),
        profile=args.profile,
    )
    if args.command == "sweep":
        spec.sweep_axis = args.sweep
        spec.values = _parse_int_list(args.values)
        spec.seeds = _parse_int_list(args.seeds)
        spec.modes = [m for m in (args.modes or "").split(",") if m]
        spec.jobs = max(1, args.jobs)
        spec.resume = bool(args.resume)
    if args.command in ("train", "eval") and getattr(args, "data", None):
        spec.data_path = Path(args.data)
    if args.command == "eval":
        spec.checkpoint = Path(args.checkpoint) if args.checkpoint else None
        spec.per_y_csv = bool(args.per_y_csv)
    return spec


def run(spec: ExperimentSpec) -> int:
    """Execute one resolved invocation; returns the process exit code."""
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
    }
    return handlers[spec.command](spec)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = spec_from_args(args)
        return run(spec)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except (InvalidArgumentError, PcaGanError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
