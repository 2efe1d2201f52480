"""Command-line pipeline: synth -> preprocess -> sequences -> train -> evaluate -> ablate -> report.

Every subcommand takes ``--config run.json`` and reads/writes files in the
run's output directory, so stages can be re-run one at a time. See
``RUN_CONFIG_SCHEMA`` below (and the README) for the configuration format.

Exit codes: 0 ok, 2 configuration error, 3 data contract violation,
4 numerical fault.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .ablation import AblationSpec, run_ablation_suite
from .data_model import Diagnosis, validate_history
from .ingest import CohortFormatError, SynthConfig, corrupt_diagnoses, generate_synthetic, load_csv, write_csv
from .models import MODEL_KINDS, RnnConfig, TransformerConfig
from .numcore import checkpoint_bytes, parse_checkpoint
from .preprocess import FillerConfig, clean
from .seeding import derive_seed
from .sequences import (CONVERTER, STABLE, balance, count_summary, extract_sequences, folds_frame,
                        manifest_frame, splits_from_frame, stratified_kfold)
from .stats import linreg_slope, mann_whitney_u
from .training import (ALL_GROUPS, EvalReport, NumericalFault, StabilityBaseline, TrainConfig,
                       cross_validate, evaluate, grid_search, pvalue_matrix)

log = logging.getLogger("adprog")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BASELINE_NAME = "Stability"

RUN_CONFIG_SCHEMA = """
{
  "global_seed": int,                       # fans out to per-stage seeds
  "output_dir": str,                        # env ADPROG_OUTPUT_DIR overrides
  "balance": "raw" | "balanced",
  "models": [subset of Transformer, LSTM, GRU, minRNN],
  "k_folds": int >= 2,
  "folds": [fold indices to run] | null,    # null = all folds
  "source": {
    "kind": "synthetic" | "csv",
    "path": str,                            # csv only
    "synth": {SynthConfig fields},          # synthetic only; rng_seed is derived
    "dx_missing_fraction": float in [0, 1)
  },
  "train": {
    "lr", "batch_size", "max_epochs", "early_stop_patience", "clip_norm",
    "validation_folds", "dtype": "float32" | "float64",
    "grid": {hyperparameter: [values]} | null,
    "model_options": {model kind: {constructor options}},
    "filler": {FillerConfig fields}
  },
  "ablation": {"model": model kind, "specs": [{"kind", "category" | "k"}]}
}
"""


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DataContractError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SourceSection:
    kind: str = "synthetic"
    path: Optional[str] = None
    synth: Mapping = field(default_factory=dict)
    dx_missing_fraction: float = 0.0


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    early_stop_patience: int = 10
    clip_norm: float = 5.0
    validation_folds: int = 10
    dtype: str = "float32"
    grid: Optional[Mapping] = None
    model_options: Mapping = field(default_factory=dict)
    filler: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class AblationSection:
    model: str = "Transformer"
    specs: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    source: SourceSection = field(default_factory=SourceSection)
    balance: str = "raw"
    models: tuple = MODEL_KINDS
    train: TrainSection = field(default_factory=TrainSection)
    k_folds: int = 10
    folds: Optional[tuple] = None
    output_dir: str = "adprog_run"
    global_seed: int = 0
    ablation: AblationSection = field(default_factory=AblationSection)

    # -- derived objects ------------------------------------------------------
    def synth_config(self) -> SynthConfig:
        options = dict(self.source.synth)
        options["rng_seed"] = derive_seed(self.global_seed, "synth") % 2**32
        return SynthConfig(**options)

    def train_config(self, kind: str) -> TrainConfig:
        t = self.train
        return TrainConfig(
            model_kind=kind, model_options=dict(t.model_options.get(kind, {})), lr=t.lr,
            batch_size=t.batch_size, max_epochs=t.max_epochs, early_stop_patience=t.early_stop_patience,
            seed=derive_seed(self.global_seed, "train", kind) % 2**32, grid=t.grid, clip_norm=t.clip_norm,
            validation_folds=t.validation_folds, dtype=t.dtype, filler=FillerConfig(**t.filler),
        )

    def ablation_specs(self) -> list[AblationSpec]:
        return [AblationSpec(**s) for s in self.ablation.specs]

    def canonical(self) -> dict:
        """Everything that affects results (the output location does not)."""
        data = dataclasses.asdict(self)
        data.pop("output_dir")
        return data

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def header(self) -> str:
        return f"config_hash={self.config_hash} seed={self.global_seed}"


def _typed(value, expected, path):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if expected is float and not isinstance(value, float):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if expected is str and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    if expected is dict and not isinstance(value, dict):
        raise ConfigError(path, f"expected an object, got {value!r}")
    if expected is list and not isinstance(value, list):
        raise ConfigError(path, f"expected a list, got {value!r}")
    return value


def _section(cls, data, path: str, types: Mapping[str, Any]):
    if data is None:
        return cls()
    _typed(data, dict, path)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    kwargs = {}
    for key, value in data.items():
        expected = types.get(key)
        if value is None:
            kwargs[key] = None
            continue
        kwargs[key] = _typed(value, expected, f"{path}.{key}") if expected else value
    return cls(**kwargs)


def _check_options(cls, options, path):
    try:
        cls(**options)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def parse_run_config(data: Mapping) -> RunConfig:
    """Validate a decoded JSON document; errors carry the offending field path."""
    _typed(data, dict, "config")
    top_types = {"balance": str, "k_folds": int, "output_dir": str, "global_seed": int, "models": list,
                 "folds": list}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config.{unknown[0]}", "unknown field")
    kw: dict[str, Any] = {}
    for key, expected in top_types.items():
        if key in data and data[key] is not None:
            kw[key] = _typed(data[key], expected, f"config.{key}")

    source = _section(SourceSection, data.get("source"), "config.source",
                      {"kind": str, "path": str, "synth": dict, "dx_missing_fraction": float})
    if source.kind not in ("synthetic", "csv"):
        raise ConfigError("config.source.kind", "must be 'synthetic' or 'csv'")
    if source.kind == "csv" and not source.path:
        raise ConfigError("config.source.path", "required when kind is 'csv'")
    if not 0 <= source.dx_missing_fraction < 1:
        raise ConfigError("config.source.dx_missing_fraction", "must lie in [0, 1)")
    synth = dict(source.synth or {})
    if "baseline_dx_weights" in synth:
        synth["baseline_dx_weights"] = tuple(synth["baseline_dx_weights"])
    source = dataclasses.replace(source, synth=synth)
    _check_options(SynthConfig, synth, "config.source.synth")

    train = _section(TrainSection, data.get("train"), "config.train",
                     {"lr": float, "batch_size": int, "max_epochs": int, "early_stop_patience": int,
                      "clip_norm": float, "validation_folds": int, "dtype": str, "grid": dict,
                      "model_options": dict, "filler": dict})
    if train.dtype not in ("float32", "float64"):
        raise ConfigError("config.train.dtype", "must be 'float32' or 'float64'")
    for kind, opts in (train.model_options or {}).items():
        if kind not in MODEL_KINDS:
            raise ConfigError(f"config.train.model_options.{kind}", f"unknown model kind; expected {MODEL_KINDS}")
        _typed(opts, dict, f"config.train.model_options.{kind}")
        if kind == "Transformer":
            _check_options(TransformerConfig, opts, f"config.train.model_options.{kind}")
        else:
            _check_options(RnnConfig, {**opts, "cell": kind}, f"config.train.model_options.{kind}")
    for key, values in (train.grid or {}).items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"config.train.grid.{key}", "must be a non-empty list")
    _check_options(FillerConfig, train.filler or {}, "config.train.filler")

    ablation = _section(AblationSection, data.get("ablation"), "config.ablation", {"model": str, "specs": list})
    if ablation.model not in MODEL_KINDS:
        raise ConfigError("config.ablation.model", f"unknown model kind; expected {MODEL_KINDS}")
    specs = []
    for i, spec in enumerate(ablation.specs or ()):
        where = f"config.ablation.specs[{i}]"
        _typed(spec, dict, where)
        try:
            AblationSpec(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(where, str(exc)) from None
        specs.append(dict(spec))
    ablation = dataclasses.replace(ablation, specs=tuple(specs))

    models = tuple(kw.pop("models", MODEL_KINDS))
    for i, m in enumerate(models):
        if m not in MODEL_KINDS:
            raise ConfigError(f"config.models[{i}]", f"unknown model kind {m!r}; expected {MODEL_KINDS}")
    if kw.get("balance", "raw") not in ("raw", "balanced"):
        raise ConfigError("config.balance", "must be 'raw' or 'balanced'")
    if kw.get("k_folds", 10) < 2:
        raise ConfigError("config.k_folds", "must be >= 2")
    folds = kw.pop("folds", None)
    if folds is not None:
        for i, f in enumerate(folds):
            if isinstance(f, bool) or not isinstance(f, int) or not 0 <= f < kw.get("k_folds", 10):
                raise ConfigError(f"config.folds[{i}]", "must be a fold index below k_folds")
        folds = tuple(folds)
    cfg = RunConfig(source=source, train=train, ablation=ablation, models=models, folds=folds, **kw)
    for kind in cfg.models:
        try:
            cfg.train_config(kind)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.train.model_options.{kind}", str(exc)) from None
    return cfg


def load_run_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_run_config(data)


# ---------------------------------------------------------------------------
# run directory helpers


class Run:
    def __init__(self, cfg: RunConfig, output_dir: Optional[str] = None, jobs: int = 1):
        self.cfg = cfg
        self.dir = Path(output_dir or cfg.output_dir)
        self.jobs = jobs
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_frame(self, frame: pd.DataFrame, *parts: str, index: bool = False) -> Path:
        p = self.path(*parts)
        buf = io.StringIO()
        buf.write(f"# {self.cfg.header()}\n")
        frame.to_csv(buf, index=index, lineterminator="\n", float_format="%.10g")
        p.write_text(buf.getvalue(), encoding="utf-8")
        return p

    def write_text(self, text: str, *parts: str) -> Path:
        p = self.path(*parts)
        p.write_text(f"# {self.cfg.header()}\n{text}", encoding="utf-8")
        return p

    def read_frame(self, *parts: str, **kw) -> pd.DataFrame:
        p = self.dir.joinpath(*parts)
        if not p.exists():
            raise DataContractError(f"{p} is missing; run the earlier pipeline stage first")
        return read_csv_with_header(p, **kw)

    def require(self, *parts: str) -> Path:
        p = self.dir.joinpath(*parts)
        if not p.exists():
            raise DataContractError(f"{p} is missing; run the earlier pipeline stage first")
        return p


def read_csv_with_header(path, **kw) -> pd.DataFrame:
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    body = "".join(ln for ln in lines if not ln.startswith("#"))
    return pd.read_csv(io.StringIO(body), **kw)


def _load_histories(path: Path):
    histories = load_csv(path)
    for h in histories:
        result = validate_history(h)
        if not result.ok:
            raise DataContractError(f"subject {h.subject_id}: {'; '.join(result.violations)}")
    return histories


def _sequence_set(run: Run) -> list:
    """Sequences listed in the manifest, rebuilt from the cleaned cohort."""
    manifest = run.read_frame("sequences.csv", dtype={"seq_id": str, "subject_id": str})
    seqs = {s.seq_id: s for s in extract_sequences(_load_histories(run.require("cleaned.csv")))}
    missing = [sid for sid in manifest["seq_id"] if sid not in seqs]
    if missing:
        raise DataContractError(f"manifest lists unknown sequence {missing[0]}")
    return [seqs[sid] for sid in manifest["seq_id"]]


def _splits(run: Run, seqs):
    frame = run.read_frame("folds.csv", dtype={"seq_id": str})
    return splits_from_frame(frame, [s.seq_id for s in seqs])


def _assert_balanced(seqs) -> None:
    table = count_summary(seqs).table
    bad = table[table["stable"] != table["converter"]]
    if not bad.empty:
        g = int(bad.iloc[0]["group"])
        raise DataContractError(
            f"balanced dataset required but group {g} has {int(bad.iloc[0]['stable'])} stable vs "
            f"{int(bad.iloc[0]['converter'])} converter sequences")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(run: Run, args) -> None:
    cfg = run.cfg
    if cfg.source.kind == "synthetic":
        histories = generate_synthetic(cfg.synth_config())
        source = "synthetic"
    else:
        try:
            histories = _load_histories(Path(cfg.source.path))
        except OSError as exc:
            raise DataContractError(f"cannot read cohort {cfg.source.path}: {exc.strerror}") from None
        source = cfg.source.path
    if cfg.source.dx_missing_fraction:
        histories = corrupt_diagnoses(histories, cfg.source.dx_missing_fraction,
                                      derive_seed(cfg.global_seed, "dx_mask") % 2**32)
    write_csv(histories, run.path("cohort.csv"), cfg.header())
    log.info("cohort: %d subjects from %s", len(histories), source)


def cmd_preprocess(run: Run, args) -> None:
    histories = _load_histories(run.require("cohort.csv"))
    cleaned, report = clean(histories)
    write_csv(cleaned, run.path("cleaned.csv"), run.cfg.header())
    run.write_text(report.as_text(), "clean_report.txt")
    log.info("cleaned: %d subjects kept", len(cleaned))


def cmd_sequences(run: Run, args) -> None:
    cfg = run.cfg
    raw = extract_sequences(_load_histories(run.require("cleaned.csv")))
    seqs = raw
    if cfg.balance == "balanced":
        seqs = balance(raw, derive_seed(cfg.global_seed, "balance"))
    splits = stratified_kfold(seqs, k=cfg.k_folds, seed=derive_seed(cfg.global_seed, "folds"))
    run.write_frame(manifest_frame(seqs), "sequences.csv")
    run.write_frame(folds_frame(splits), "folds.csv")
    counts = []
    for name, subset in (("raw", raw), ("balanced", balance(raw, derive_seed(cfg.global_seed, "balance")))):
        t = count_summary(subset).table.copy()
        t.insert(0, "dataset", name)
        counts.append(t)
    run.write_frame(pd.concat(counts, ignore_index=True), "sequence_counts.csv")
    log.info("sequences: %d (%s)", len(seqs), cfg.balance)


def _models_arg(run: Run, args) -> list[str]:
    models = list(args.models) if getattr(args, "models", None) else list(run.cfg.models)
    for m in models:
        if m not in MODEL_KINDS:
            raise ConfigError("--models", f"unknown model kind {m!r}")
    return models


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    seqs = _sequence_set(run)
    requested = getattr(args, "balance", None) or cfg.balance
    if requested == "balanced":
        _assert_balanced(seqs)
    splits = _splits(run, seqs)
    for kind in _models_arg(run, args):
        tcfg = cfg.train_config(kind)
        if tcfg.grid:
            tcfg, table = grid_search(seqs, tcfg, k=cfg.k_folds, split_seed=derive_seed(cfg.global_seed, "folds"),
                                      folds=cfg.folds)
            run.write_frame(table, f"grid_{kind}.csv")
        result = cross_validate(seqs, tcfg, splits=splits, folds=cfg.folds, jobs=run.jobs)
        pred_rows, log_rows = [], []
        for outcome in result.outcomes:
            ckpt = run.path("checkpoints", f"{kind}_fold{outcome.fold}.ckpt")
            ckpt.write_bytes(_stamp_checkpoint(outcome.checkpoint, cfg))
            log_rows += [{"fold": outcome.fold, **entry} for entry in outcome.log]
            for sid, p in zip(outcome.test_ids, outcome.probabilities):
                pred_rows.append({"fold": outcome.fold, "seq_id": sid, "p_CN": p[0], "p_MCI": p[1], "p_AD": p[2]})
        run.write_frame(pd.DataFrame(pred_rows), f"predictions_{kind}.csv")
        run.write_frame(pd.DataFrame(log_rows), f"training_log_{kind}.csv")
        log.info("trained %s on %d folds", kind, len(result.outcomes))


def _stamp_checkpoint(blob: bytes, cfg: RunConfig) -> bytes:
    config, tensors = parse_checkpoint(blob)
    config["run"] = {"config_hash": cfg.config_hash, "seed": cfg.global_seed}
    return checkpoint_bytes(tensors, config)


def _probs_frame(run: Run, kind: str) -> pd.DataFrame:
    return run.read_frame(f"predictions_{kind}.csv", dtype={"seq_id": str})


def _eval_from_predictions(seqs, splits, preds: Optional[pd.DataFrame]) -> EvalReport:
    by_id = {s.seq_id: s for s in seqs}
    reports = []
    for sp in splits:
        if preds is None:
            test = [by_id[sid] for sid in sorted(sp.test)]
            reports.append(evaluate(StabilityBaseline(), test, fold=sp.fold_index))
            continue
        part = preds[preds["fold"] == sp.fold_index].sort_values("seq_id")
        if part.empty:
            continue
        test = [by_id[sid] for sid in part["seq_id"]]
        probs = part[["p_CN", "p_MCI", "p_AD"]].to_numpy(dtype=float)
        reports.append(evaluate(None, test, fold=sp.fold_index, probs=probs))
    return EvalReport.concat(reports)


def cmd_evaluate(run: Run, args) -> None:
    cfg = run.cfg
    seqs = _sequence_set(run)
    splits = _splits(run, seqs)
    if cfg.folds is not None:
        splits = [splits[i] for i in cfg.folds]
    fold_bca = {}
    for kind in [*_models_arg(run, args), BASELINE_NAME]:
        preds = None if kind == BASELINE_NAME else _probs_frame(run, kind)
        report = _eval_from_predictions(seqs, splits, preds)
        run.write_frame(report.rows, f"eval_{kind}.csv")
        run.write_frame(report.counts, f"eval_counts_{kind}.csv")
        run.write_frame(report.aggregate(), f"summary_{kind}.csv")
        fold_bca[kind] = report
    rows = []
    for metric in ("bca", "accuracy", "sensitivity", "specificity", "macro_f1", "mauc"):
        for subset in ("overall", STABLE, CONVERTER):
            values = {k: r.fold_values(metric, subset) for k, r in fold_bca.items()}
            usable = {k: v for k, v in values.items() if len(v) >= 2 and not np.isnan(v).any()}
            if len(usable) < 2:
                continue
            mat = pvalue_matrix(usable)
            for a in mat.index:
                for b in mat.columns:
                    if a != b:
                        rows.append({"metric": metric, "subset": subset, "model_a": a, "model_b": b,
                                     "p_value": float(mat.loc[a, b])})
    run.write_frame(pd.DataFrame(rows, columns=["metric", "subset", "model_a", "model_b", "p_value"]),
                    "pvalues.csv")


def cmd_ablate(run: Run, args) -> None:
    cfg = run.cfg
    specs = cfg.ablation_specs()
    if not specs:
        raise ConfigError("config.ablation.specs", "no ablation specs configured")
    seqs = _sequence_set(run)
    tcfg = cfg.train_config(cfg.ablation.model)
    table, results = run_ablation_suite(seqs, specs, tcfg, k=cfg.k_folds,
                                        split_seed=derive_seed(cfg.global_seed, "folds"),
                                        folds=cfg.folds, jobs=run.jobs)
    run.write_frame(table, "ablation.csv")
    fold_rows = []
    for key, res in results.items():
        kind, detail = ("baseline", "") if key == "baseline" else key
        for fold, value in zip(sorted(res.report.rows["fold"].unique()), res.report.fold_values("bca")):
            fold_rows.append({"spec_kind": kind, "detail": detail, "fold": int(fold), "bca": value})
    run.write_frame(pd.DataFrame(fold_rows), "ablation_folds.csv")


def cmd_report(run: Run, args) -> None:
    """Collate stage outputs into plot-ready tables under ``report/``."""
    cfg = run.cfg
    out = []
    counts = run.read_frame("sequence_counts.csv")
    run.write_frame(counts, "report", "sequence_counts.csv")
    run.write_frame(counts[["dataset", "group", "stable", "converter", "total"]], "report", "group_distribution.csv")
    raw = counts[counts["dataset"] == "raw"]
    run.write_frame(raw[["group", "target_CN", "target_MCI", "target_AD"]]
                    .rename(columns=lambda c: c.replace("target_", "")), "report", "target_dx_by_group.csv")
    out += ["sequence_counts", "group_distribution", "target_dx_by_group"]

    summaries = {}
    for kind in [*cfg.models, BASELINE_NAME]:
        p = run.dir / f"summary_{kind}.csv"
        if p.exists():
            summaries[kind] = read_csv_with_header(p, dtype={"group": str})
    if summaries:
        metrics = []
        for kind, s in summaries.items():
            part = s[s["group"] == ALL_GROUPS].drop(columns="group").copy()
            part.insert(0, "model", kind)
            metrics.append(part)
        run.write_frame(pd.concat(metrics, ignore_index=True), "report", "model_metrics.csv")
        group_rows = []
        for kind, s in summaries.items():
            part = s[(s["metric"] == "bca") & (s["group"] != ALL_GROUPS)].copy()
            part.insert(0, "model", kind)
            group_rows.append(part)
        groups = pd.concat(group_rows, ignore_index=True)
        groups["group"] = groups["group"].astype(int)
        groups = groups.sort_values(["subset", "model", "group"], kind="mergesort")
        run.write_frame(groups[groups["subset"] == "overall"][["model", "group", "mean", "std", "n_folds"]],
                        "report", "group_bca.csv")
        run.write_frame(groups[groups["subset"] != "overall"][["model", "subset", "group", "mean", "std", "n_folds"]],
                        "report", "subset_group_bca.csv")
        out += ["model_metrics", "group_bca", "subset_group_bca"]
    if (run.dir / "pvalues.csv").exists():
        run.write_frame(run.read_frame("pvalues.csv"), "report", "pvalues.csv")
        out.append("pvalues")

    if (run.dir / "ablation.csv").exists():
        abl = run.read_frame("ablation.csv")
        names = {"history_last_k": "visit_history_ablation", "remove_category": "category_removal",
                 "isolate_category": "category_isolation"}
        for kind, name in names.items():
            part = abl[abl["spec_kind"] == kind]
            if not part.empty:
                run.write_frame(part.rename(columns={"mean_bca": "bca", "pct_change_vs_baseline": "pct_change"}),
                                "report", f"{name}.csv")
                out.append(name)

    slopes = _adas13_slopes(run)
    if slopes is not None:
        table, test = slopes
        run.write_frame(table, "report", "adas13_slopes.csv")
        run.write_frame(test, "report", "adas13_slope_test.csv")
        out.append("adas13_slopes")
    mis = _misclassified_adas13(run)
    if mis is not None:
        run.write_frame(mis[0], "report", "adas13_misclassified.csv")
        run.write_frame(mis[1], "report", "adas13_misclassified_test.csv")
        out.append("adas13_misclassified")
    log.info("report tables: %s", ", ".join(out))


SHORT_HISTORY_MAX_GROUP = 4


def _adas13_slopes(run: Run):
    """Per-sequence OLS slope of ADAS13 (per month), short vs long history."""
    try:
        seqs = _sequence_set(run)
    except DataContractError:
        return None
    rows = []
    for s in seqs:
        pts = [(v.exam_month, v.features["ADAS13"]) for v in s.visits if v.features.get("ADAS13") is not None]
        if len(pts) < 2 or len({m for m, _ in pts}) < 2:
            continue
        months, values = zip(*pts)
        history = "short" if s.group <= SHORT_HISTORY_MAX_GROUP else "long"
        rows.append({"seq_id": s.seq_id, "group": s.group, "history": history,
                     "slope_per_month": linreg_slope(values, months)})
    table = pd.DataFrame(rows, columns=["seq_id", "group", "history", "slope_per_month"])
    short = table.loc[table["history"] == "short", "slope_per_month"].to_numpy()
    long_ = table.loc[table["history"] == "long", "slope_per_month"].to_numpy()
    test = pd.DataFrame(columns=["n_short", "n_long", "median_short", "median_long", "u", "p_value"])
    if short.size and long_.size:
        mw = mann_whitney_u(short, long_)
        test.loc[0] = [short.size, long_.size, float(np.median(short)), float(np.median(long_)), mw.u, mw.p]
    return table, test


def _misclassified_adas13(run: Run):
    """Penultimate ADAS13 of AD-target sequences predicted MCI vs predicted AD."""
    cfg = run.cfg
    kind = "Transformer" if "Transformer" in cfg.models else (cfg.models[0] if cfg.models else None)
    if kind is None or not (run.dir / f"predictions_{kind}.csv").exists():
        return None
    preds = _probs_frame(run, kind)
    seqs = {s.seq_id: s for s in _sequence_set(run)}
    rows = []
    for _, r in preds.iterrows():
        s = seqs[r["seq_id"]]
        if s.target_dx != Diagnosis.AD:
            continue
        pred = int(np.argmax([r["p_CN"], r["p_MCI"], r["p_AD"]]))
        value = s.visits[-2].features.get("ADAS13")
        if value is None or pred == int(Diagnosis.CN):
            continue
        rows.append({"seq_id": s.seq_id, "predicted": Diagnosis(pred).name, "penultimate_ADAS13": value})
    table = pd.DataFrame(rows, columns=["seq_id", "predicted", "penultimate_ADAS13"])
    wrong = table.loc[table["predicted"] == "MCI", "penultimate_ADAS13"].to_numpy()
    right = table.loc[table["predicted"] == "AD", "penultimate_ADAS13"].to_numpy()
    test = pd.DataFrame(columns=["n_predicted_MCI", "n_predicted_AD", "u", "p_value"])
    if wrong.size and right.size:
        mw = mann_whitney_u(wrong, right)
        test.loc[0] = [wrong.size, right.size, mw.u, mw.p]
    return table, test


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "sequences": cmd_sequences,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adprog", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__ or f"run the {name} stage")
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--output-dir", default=None, help="override the configured output directory")
        p.add_argument("--jobs", type=int, default=None, help="parallel fold workers (default 1)")
        if name in ("train", "evaluate"):
            p.add_argument("--models", nargs="+", default=None, help=f"subset of {', '.join(MODEL_KINDS)}")
        if name == "train":
            p.add_argument("--balance", choices=("raw", "balanced"), default=None,
                           help="require this dataset variant (balanced is checked per group)")
    return parser


def _resolve_jobs(args, env: Mapping[str, str]) -> int:
    if args.jobs is not None:
        jobs = args.jobs
    elif env.get("ADPROG_JOBS"):
        try:
            jobs = int(env["ADPROG_JOBS"])
        except ValueError:
            raise ConfigError("ADPROG_JOBS", "must be an integer") from None
    else:
        jobs = 1
    if jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    return jobs


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    env = os.environ if env is None else env
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        output_dir = args.output_dir or env.get("ADPROG_OUTPUT_DIR") or cfg.output_dir
        run = Run(cfg, output_dir, _resolve_jobs(args, env))
        COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataContractError, CohortFormatError) as exc:
        print(f"data contract violation: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
