"""
Module for the batch commands behind the command-line front end.

COMMANDS:
=========
- simulate:  write a synthetic dataset (and optionally a train/test split).
- train:     fit one model per seed and write model JSON plus loss logs.
- eval:      score models on a test file at the percentile horizons.
- symbolify: turn models into formulas and write per-feature curve samples.
- sweep:     retrain and evaluate over spline orders or gamma values.

Every command receives the merged option dictionary (flags over config file
over defaults) and writes a manifest.json next to its artifacts. Apart from
the wall-clock entry of the manifest, every artifact is a pure function of
the options and input files.
"""

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from src.components.cox_engine import breslow_baseline, build_risk_index, fit_linear_cph, predict_survival
from src.components.datasets import (
    CsvSchema,
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    split,
    write_csv,
)
from src.components.errors import ConfigurationError, DataError, GcphError
from src.components.kan_model import (
    GcphModel,
    load_model,
    log_risk_batch,
    raw_scale_slopes,
    save_model,
    standardize,
)
from src.components.metrics import Horizon, censoring_km, horizon_metrics, percentile_horizons
from src.components.symbolic import render_formula, symbolic_log_risk, symbolic_to_dict, symbolify
from src.components.trainer import RegConfig, TrainConfig, l1_norm_per_activation, train, train_multi_seed
from src.helper_modules.plot_data import surface_frame, write_curves, write_frame

_SCHEMA_DEFAULTS = {"schema": None, "time_col": "time", "event_col": "event", "categorical": []}
_TRAIN_DEFAULTS = {
    "num_intervals": 5,
    "order": 3,
    "learning_rate": 0.01,
    "max_steps": 2000,
    "gamma": 0.1,
    "mu1": 1.0,
    "mu2": 10.0,
    "linear_only": False,
    "log_every": 1,
    "workers": 1,
}

COMMAND_DEFAULTS: Dict[str, dict] = {
    "simulate": {
        "kind": "linear",
        "n": 2000,
        "seed": 0,
        "lam": 5.0,
        "r": 2.0,
        "mean_t0": 5.0,
        "censor_fraction": 0.10,
        "test_fraction": None,
        "out": ".",
    },
    "train": {"data": None, "seed": 0, "seeds": None, "out": ".", **_SCHEMA_DEFAULTS, **_TRAIN_DEFAULTS},
    "eval": {
        "models": [],
        "train": None,
        "test": None,
        "baseline_cph": False,
        "truth_scores": False,
        "weighting": "event_weighted",
        "surface": False,
        "out": ".",
        **_SCHEMA_DEFAULTS,
    },
    "symbolify": {"models": [], "train": None, "candidates": None, "decimals": 2, "out": ".", **_SCHEMA_DEFAULTS},
    "sweep": {
        "data": None,
        "test": None,
        "test_fraction": 0.2,
        "split_seed": 0,
        "order_values": None,
        "gamma_values": None,
        "seeds": [0, 1, 2],
        "weighting": "event_weighted",
        "out": ".",
        **_SCHEMA_DEFAULTS,
        **_TRAIN_DEFAULTS,
    },
}

SWEEP_COLUMNS = ["axis", "axis_value", "seed", "horizon", "c_index", "brier", "l1_total"]


@dataclass
class RunManifest:
    """Everything needed to repeat a command."""

    command: str
    config: dict
    seeds: List[int] = field(default_factory=list)
    fingerprints: Dict[str, str] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)
    encodings: Dict[str, dict] = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    def add_input(self, path):
        self.fingerprints[str(path)] = fingerprint(path)

    def add_encoding(self, path, schema: CsvSchema, ds: Dataset):
        """Record how a tabular input was read, including its categorical levels."""
        self.encodings[str(path)] = {
            "schema": schema.to_dict(),
            "encoding": None if ds.encoding is None else ds.encoding.to_dict(),
        }

    def add_artifact(self, path):
        self.artifacts.append(str(path))

    @property
    def exit_code(self) -> int:
        return max((f["exit_code"] for f in self.failures), default=0)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "fingerprints": self.fingerprints,
            "artifacts": self.artifacts,
            "failures": self.failures,
            "encodings": self.encodings,
            "wall_clock": self.wall_clock,
        }

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, default=str) + "\n", encoding="utf-8")
        return path


def fingerprint(path) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def merge_options(command: str, file_options: Optional[dict], flag_options: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    defaults = COMMAND_DEFAULTS[command]
    merged = dict(defaults)
    for source in (file_options or {}, flag_options):
        unknown = set(source) - set(defaults) - {"config", "log_level", "command"}
        if unknown:
            raise ConfigurationError(f"Unknown options for '{command}': {sorted(unknown)}")
        merged.update({k: v for k, v in source.items() if k in defaults})
    return merged


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    return payload


def _out_dir(opts: dict) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out}: {e}") from e
    return out


def _schema(opts: dict) -> CsvSchema:
    if opts.get("schema"):
        return CsvSchema.from_json(opts["schema"])
    return CsvSchema(
        time_col=opts["time_col"],
        event_col=opts["event_col"],
        categorical_cols=tuple(opts["categorical"] or ()),
    )


def _train_configs(opts: dict, seed: int = 0) -> Tuple[TrainConfig, RegConfig]:
    train_cfg = TrainConfig(
        num_intervals=int(opts["num_intervals"]),
        order=int(opts["order"]),
        learning_rate=float(opts["learning_rate"]),
        max_steps=int(opts["max_steps"]),
        seed=int(seed),
        linear_only=bool(opts["linear_only"]),
        log_every=int(opts["log_every"]),
    )
    reg_cfg = RegConfig(mu1=float(opts["mu1"]), mu2=float(opts["mu2"]), gamma=float(opts["gamma"]))
    return train_cfg, reg_cfg


def _start(command: str, opts: dict) -> Tuple[RunManifest, float]:
    manifest = RunManifest(command=command, config=dict(opts))
    manifest.wall_clock["started"] = datetime.now(timezone.utc).isoformat()
    return manifest, time.perf_counter()


def _finish(manifest: RunManifest, started: float, out: Path) -> RunManifest:
    manifest.wall_clock["seconds"] = round(time.perf_counter() - started, 3)
    path = manifest.write(out)
    logger.info(f"Manifest written to {path}")
    return manifest


def _write_json(payload, path: Path) -> Path:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def cmd_simulate(opts: dict) -> RunManifest:
    manifest, started = _start("simulate", opts)
    out = _out_dir(opts)
    cfg = SyntheticConfig(
        kind=opts["kind"],
        n=int(opts["n"]),
        lam=float(opts["lam"]),
        r=float(opts["r"]),
        mean_t0=float(opts["mean_t0"]),
        censor_fraction=float(opts["censor_fraction"]),
        seed=int(opts["seed"]),
    )
    manifest.seeds = [cfg.seed]
    ds = generate_synthetic(cfg)
    manifest.add_artifact(write_csv(ds, out / "data.csv"))
    if opts["test_fraction"] is not None:
        train_ds, test_ds = split(ds, float(opts["test_fraction"]), cfg.seed)
        manifest.add_artifact(write_csv(train_ds, out / "train.csv"))
        manifest.add_artifact(write_csv(test_ds, out / "test.csv"))

    q25, q50, q75 = np.percentile(ds.time, [25, 50, 75])
    print(f"Simulated {cfg.kind} data: n={ds.num_records}, seed={cfg.seed}")
    print(f"Censor rate: {1.0 - ds.event.mean():.4f}")
    print(f"Time quantiles: p25={q25:.4f} p50={q50:.4f} p75={q75:.4f}")
    return _finish(manifest, started, out)


def cmd_train(opts: dict) -> RunManifest:
    manifest, started = _start("train", opts)
    out = _out_dir(opts)
    if not opts["data"]:
        raise ConfigurationError("train needs --data")
    schema = _schema(opts)
    ds = load_csv(opts["data"], schema)
    manifest.add_input(opts["data"])
    manifest.add_encoding(opts["data"], schema, ds)
    suffixed = opts["seeds"] is not None
    seeds = [int(s) for s in opts["seeds"]] if suffixed else [int(opts["seed"])]
    manifest.seeds = seeds
    train_cfg, reg_cfg = _train_configs(opts)
    runs = train_multi_seed(
        ds.X,
        ds.time,
        ds.event,
        train_cfg,
        reg_cfg,
        seeds,
        workers=int(opts["workers"]),
        feature_names=ds.feature_names,
        standardization=ds.standardization,
    )
    # Save each run and report the selected iterate
    for seed, (model, log) in zip(seeds, runs):
        tag = f"_seed{seed}" if suffixed else ""
        manifest.add_artifact(save_model(model, out / f"model{tag}.json"))
        manifest.add_artifact(log.to_csv(out / f"train_log{tag}.csv"))
        print(f"Seed {seed}: best loss {log.best_loss:.6f} at step {log.best_step}")
        if model.linear_only:
            slopes = raw_scale_slopes(model)
            print("  raw-scale slopes: " + ", ".join(f"{n}={s:.4f}" for n, s in zip(model.feature_names, slopes)))
            if len(slopes) == 2 and slopes[0] != 0:
                print(f"  slope ratio {model.feature_names[1]}/{model.feature_names[0]}: {slopes[1] / slopes[0]:.4f}")
    return _finish(manifest, started, out)


def _model_scores(m: GcphModel, ds: Dataset) -> np.ndarray:
    if tuple(m.feature_names) != tuple(ds.feature_names):
        raise DataError(f"Model features {list(m.feature_names)} do not match data features {list(ds.feature_names)}")
    return log_risk_batch(m, standardize(m, ds.raw_X))


def _score_rows(
    name: str,
    train_scores: np.ndarray,
    test_scores: np.ndarray,
    train_ds: Dataset,
    test_ds: Dataset,
    horizons: Sequence[Horizon],
    weighting: str,
) -> dict:
    base = breslow_baseline(train_scores, build_risk_index(train_ds.time, train_ds.event))
    cells = horizon_metrics(
        test_ds.time,
        test_ds.event,
        test_scores,
        lambda t: predict_survival(test_scores, base, t),
        horizons,
        censoring_km(train_ds.time, train_ds.event),
        weighting,
    )
    return {"name": name, "cells": cells}


def _summary(rows: List[dict]) -> Dict[str, dict]:
    """Mean and sd per horizon across model rows (Table-style reporting)."""
    summary = {}
    if not rows:
        return summary
    for k, cell in enumerate(rows[0]["cells"]):
        entry = {}
        for metric in ("c_index", "brier"):
            values = [r["cells"][k][metric] for r in rows if r["cells"][k][metric] is not None]
            entry[f"{metric}_mean"] = float(np.mean(values)) if values else None
            entry[f"{metric}_sd"] = float(np.std(values, ddof=1)) if len(values) > 1 else None
        summary[cell["horizon_label"]] = entry
    return summary


def cmd_eval(opts: dict) -> RunManifest:
    manifest, started = _start("eval", opts)
    out = _out_dir(opts)
    if not opts["train"] or not opts["test"]:
        raise ConfigurationError("eval needs --train and --test")
    if not opts["models"] and not opts["baseline_cph"] and not opts["truth_scores"]:
        raise ConfigurationError("eval needs at least one model, --baseline-cph or --truth-scores")
    # Read both files with the training encoding
    schema = _schema(opts)
    train_ds = load_csv(opts["train"], schema)
    test_ds = load_csv(opts["test"], schema, encoding=train_ds.encoding)
    manifest.add_input(opts["train"])
    manifest.add_input(opts["test"])
    manifest.add_encoding(opts["train"], schema, train_ds)
    horizons = percentile_horizons(train_ds.time)
    weighting = opts["weighting"]

    # Score every model file
    model_rows = []
    for path in opts["models"]:
        m = load_model(path)
        manifest.add_input(path)
        row = _score_rows(
            Path(path).stem, _model_scores(m, train_ds), _model_scores(m, test_ds), train_ds, test_ds, horizons, weighting
        )
        model_rows.append(row)
        if opts["surface"] and m.num_features != 2:
            logger.warning(f"Skipping surface for {path}: it has {m.num_features} features, not 2")
        elif opts["surface"]:
            surface_path = out / f"surface_{Path(path).stem}.csv"
            manifest.add_artifact(write_frame(surface_frame(m), surface_path))

    # Reference rows
    extra_rows = []
    if opts["baseline_cph"]:
        fit = fit_linear_cph(train_ds.X, train_ds.time, train_ds.event)
        extra_rows.append(
            _score_rows("linear_cph", train_ds.X @ fit.beta, test_ds.X @ fit.beta, train_ds, test_ds, horizons, weighting)
        )
    if opts["truth_scores"]:
        if train_ds.ground_truth is None or test_ds.ground_truth is None:
            raise DataError("--truth-scores needs a ground-truth column in both files")
        extra_rows.append(
            _score_rows("truth", train_ds.ground_truth, test_ds.ground_truth, train_ds, test_ds, horizons, weighting)
        )

    # Write metrics.json and the flat metrics.csv
    payload = {
        "horizons": [{"label": h.label, "t": h.t} for h in horizons],
        "models": model_rows + extra_rows,
        "summary": _summary(model_rows),
    }
    manifest.add_artifact(_write_json(payload, out / "metrics.json"))

    records = [
        {"model": row["name"], **{k: v for k, v in cell.items() if k != "reason"}}
        for row in model_rows + extra_rows
        for cell in row["cells"]
    ]
    frame = pd.DataFrame(records, columns=["model", "horizon_label", "horizon_t", "c_index", "brier"])
    frame.to_csv(out / "metrics.csv", index=False, float_format="%.17g", lineterminator="\n")
    manifest.add_artifact(out / "metrics.csv")
    print(frame.to_string(index=False))
    return _finish(manifest, started, out)


def _pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def cmd_symbolify(opts: dict) -> RunManifest:
    manifest, started = _start("symbolify", opts)
    out = _out_dir(opts)
    if not opts["models"] or not opts["train"]:
        raise ConfigurationError("symbolify needs --models and --train")
    schema = _schema(opts)
    train_ds = load_csv(opts["train"], schema)
    manifest.add_input(opts["train"])
    manifest.add_encoding(opts["train"], schema, train_ds)
    candidates = opts["candidates"]

    # Fit closed forms for every model
    models, names, entries, lines = [], [], [], []
    for path in opts["models"]:
        m = load_model(path)
        manifest.add_input(path)
        if tuple(m.feature_names) != tuple(train_ds.feature_names):
            raise DataError(f"Model {path} does not match the features of {opts['train']}")
        X = standardize(m, train_ds.raw_X)
        sm = symbolify(m, X, candidates=candidates)
        formula = render_formula(sm, int(opts["decimals"]))
        fidelity = _pearson(symbolic_log_risk(sm, X), log_risk_batch(m, X))
        name = Path(path).stem
        entries.append({"model": name, "formula": formula, "fidelity": fidelity, **symbolic_to_dict(sm)})
        lines.append(formula)
        models.append(m)
        names.append(name)
        print(f"{name}: {formula}")
        for term in sm.terms:
            print(f"  {m.feature_names[term.feature]}: {term.candidate} (R2={term.r2:.4f})")
        if fidelity is not None:
            print(f"  fidelity: {fidelity:.4f}")

    # Write formulas, structured output and curve samples
    formula_path = out / "formula.txt"
    formula_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.add_artifact(formula_path)
    manifest.add_artifact(_write_json(entries, out / "symbolic.json"))
    for path in write_curves(models, names, train_ds.raw_ranges, out):
        manifest.add_artifact(path)
    return _finish(manifest, started, out)


def _sweep_axis(opts: dict) -> Tuple[str, List[float]]:
    orders, gammas = opts["order_values"], opts["gamma_values"]
    if (orders is None) == (gammas is None):
        raise ConfigurationError("sweep needs exactly one of --order or --gamma")
    if orders is not None:
        return "order", [int(v) for v in orders]
    return "gamma", [float(v) for v in gammas]


def _sweep_cell(
    axis: str,
    value,
    seed: int,
    opts: dict,
    train_ds: Dataset,
    test_ds: Dataset,
    horizons: Sequence[Horizon],
) -> List[dict]:
    cell_opts = dict(opts, **{axis: value})
    train_cfg, reg_cfg = _train_configs(cell_opts, seed)
    model, _ = train(train_ds.X, train_ds.time, train_ds.event, train_cfg, reg_cfg, train_ds.feature_names, train_ds.standardization)
    row = _score_rows(
        f"{axis}={value}", _model_scores(model, train_ds), _model_scores(model, test_ds), train_ds, test_ds, horizons, opts["weighting"]
    )
    l1_total = float(l1_norm_per_activation(model, train_ds.X).sum())
    return [
        {
            "axis": axis,
            "axis_value": value,
            "seed": seed,
            "horizon": cell["horizon_label"],
            "c_index": cell["c_index"],
            "brier": cell["brier"],
            "l1_total": l1_total,
        }
        for cell in row["cells"]
        if cell["horizon_t"] is not None
    ]


def cmd_sweep(opts: dict) -> RunManifest:
    manifest, started = _start("sweep", opts)
    out = _out_dir(opts)
    if not opts["data"]:
        raise ConfigurationError("sweep needs --data")
    axis, values = _sweep_axis(opts)
    schema = _schema(opts)
    ds = load_csv(opts["data"], schema)
    manifest.add_input(opts["data"])
    manifest.add_encoding(opts["data"], schema, ds)
    # Use the given test file or split the data
    if opts["test"]:
        train_ds = ds
        test_ds = load_csv(opts["test"], schema, encoding=ds.encoding)
        manifest.add_input(opts["test"])
    else:
        train_ds, test_ds = split(ds, float(opts["test_fraction"]), int(opts["split_seed"]))
    horizons = percentile_horizons(train_ds.time)
    seeds = [int(s) for s in opts["seeds"]]
    manifest.seeds = seeds
    # One cell per (axis value, seed)
    grid = [(value, seed) for value in values for seed in seeds]

    def run(item):
        value, seed = item
        try:
            return _sweep_cell(axis, value, seed, opts, train_ds, test_ds, horizons), None
        except GcphError as e:
            return [], e

    workers = int(opts["workers"])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, grid))
    else:
        results = [run(item) for item in grid]

    # Keep successful cells and record failures
    rows = []
    for (value, seed), (cell_rows, error) in zip(grid, results):
        if error is None:
            rows.extend(cell_rows)
            continue
        logger.error(f"Sweep cell {axis}={value} seed={seed} failed: {error}")
        manifest.failures.append(
            {"axis_value": value, "seed": seed, "error": str(error), "exit_code": error.exit_code}
        )

    path = out / "sweep.csv"
    pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    manifest.add_artifact(path)
    print(f"Sweep over {axis}: {len(grid) - len(manifest.failures)}/{len(grid)} cells succeeded, {len(rows)} rows")
    return _finish(manifest, started, out)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "symbolify": cmd_symbolify,
    "sweep": cmd_sweep,
}
