"""Fold preparation, training with early stopping, evaluation and cross-validation."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import numcore as nc
from .data_model import N_CLASSES
from .metrics import bca, confusion_matrix, degenerate_classes, mauc, metric_suite
from .models import MODEL_KINDS, build_model, model_from_state, model_to_bytes, predict_labels, softmax_rows
from .models.transformer import TransformerModel
from .preprocess import FillerConfig, NormStats, apply_norm, fit_norm, model_fill, train_filler
from .seeding import derive_seed
from .sequences import CONVERTER, STABLE, DatasetSplit, VisitSequence, stratified_kfold, validation_carve_out
from .stats import welch_t_test

log = logging.getLogger(__name__)

SUBSETS = ("overall", STABLE, CONVERTER)
ALL_GROUPS = "all"
DEFAULT_GRID = {"lr": (1e-4, 3e-4, 1e-3), "hidden_dim": (64, 128, 256), "d_ffn": (256, 512, 1024)}
_GRID_TARGET = {"hidden_dim": ("LSTM", "GRU", "minRNN"), "d_ffn": ("Transformer",)}


class NumericalFault(ArithmeticError):
    """Training diverged (non-finite loss or parameters)."""


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "Transformer"
    model_options: Mapping = field(default_factory=dict)
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    early_stop_patience: int = 10
    seed: int = 0
    grid: Optional[Mapping[str, Sequence]] = None
    clip_norm: float = 5.0
    validation_folds: int = 10
    dtype: str = "float32"
    filler: FillerConfig = field(default_factory=FillerConfig)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        for name in ("batch_size", "max_epochs", "early_stop_patience", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.validation_folds < 2:
            raise ValueError("validation_folds must be >= 2")
        if self.grid is not None:
            for key, values in self.grid.items():
                if not len(values):
                    raise ValueError(f"grid[{key}] is empty")


# ---------------------------------------------------------------------------
# fold preparation


@dataclass
class FoldData:
    """Model-ready (filled and normalised) train/test sequences of one fold."""

    train: list
    test: list
    norm: NormStats
    filler_history: list


def prepare_fold(train: Sequence[VisitSequence], test: Sequence[VisitSequence],
                 filler_cfg: FillerConfig = FillerConfig()) -> FoldData:
    """Fit normalisation and the filler on ``train`` only, then fill and normalise both."""
    norm = fit_norm(train)
    filler = train_filler(apply_norm(train, norm), filler_cfg)
    train_f = apply_norm(model_fill(train, filler, norm), norm)
    test_f = apply_norm(model_fill(test, filler, norm), norm)
    return FoldData(train_f, test_f, norm, filler.history)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    log: list
    best_epoch: int
    best_val_bca: float

    def checkpoint(self, extra: Optional[Mapping] = None) -> bytes:
        return model_to_bytes(self.model, extra)


def _loss(model, batch, step: int, seed: int) -> nc.Tensor:
    if isinstance(model, TransformerModel):
        return model.batch_loss(batch, train=True, step=step, seed=seed)
    return model.batch_loss(batch)


def _finite_params(model) -> bool:
    return all(np.isfinite(p.data).all() for _, p in model.params.items())


def validation_bca(model, sequences: Sequence[VisitSequence]) -> float:
    if not sequences:
        return float("nan")
    probs = softmax_rows(model.predict_logits(list(sequences)))
    y = np.array([int(s.target_dx) for s in sequences])
    return bca(confusion_matrix(y, predict_labels(probs)))


def train_fold(train: Sequence[VisitSequence], cfg: TrainConfig,
               validation: Optional[Sequence[VisitSequence]] = None) -> TrainResult:
    """Train one model with Adam and early stopping on validation BCA.

    Without an explicit ``validation`` set a group-stratified tenth of
    ``train`` is held out. The returned model carries the parameters of the
    best validation epoch (earliest on ties). Deterministic given
    ``cfg.seed``.
    """
    train = list(train)
    if validation is None:
        train, validation = validation_carve_out(train, derive_seed(cfg.seed, "carve"), cfg.validation_folds)
    dtype = np.dtype(cfg.dtype)
    model = build_model(cfg.model_kind, cfg.model_options, seed=derive_seed(cfg.seed, "init") % 2**32, dtype=dtype)
    rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
    drop_seed = derive_seed(cfg.seed, "dropout")
    history = []
    best_state, best_bca, best_epoch = model.params.copy_state(), -1.0, -1
    since_best = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train[i] for i in order[lo:lo + cfg.batch_size]]
            batch = model.make_batch(chunk)
            model.params.zero_grad()
            loss = _loss(model, batch, step, drop_seed)
            value = float(loss.data)
            if not np.isfinite(value):
                msg = f"non-finite training loss at epoch {epoch}, step {step}"
                log.error("%s; history=%s", msg, history)
                raise NumericalFault(msg)
            loss.backward()
            nc.clip_grad_norm(model.params, cfg.clip_norm)
            nc.adam_step(model.params, lr=cfg.lr)
            step += 1
            total += value * len(chunk)
            count += len(chunk)
        if not _finite_params(model):
            raise NumericalFault(f"non-finite parameters after epoch {epoch}")
        val = validation_bca(model, validation) if validation else float("nan")
        history.append({"epoch": epoch, "train_loss": total / max(count, 1), "val_bca": val})
        log.info("%s epoch %d loss %.4f val_bca %.4f", cfg.model_kind, epoch, history[-1]["train_loss"], val)
        score = val if np.isfinite(val) else float(epoch)  # no validation: keep the last epoch
        if score > best_bca or best_epoch < 0:
            best_bca, best_epoch, since_best = score, epoch, 0
            best_state = model.params.copy_state()
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    model.params.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, float(best_bca))


# ---------------------------------------------------------------------------
# evaluation


class StabilityBaseline:
    """Predicts that the next diagnosis equals the most recent one."""

    def predict_logits(self, sequences: Sequence[VisitSequence]) -> np.ndarray:
        out = np.full((len(sequences), N_CLASSES), -30.0)
        for i, s in enumerate(sequences):
            out[i, int(s.penultimate_dx)] = 30.0
        return out


REPORT_COLUMNS = ["fold", "subset", "group", "metric", "value", "flag"]
COUNT_COLUMNS = ["fold", "subset", "group", "true_dx", "pred_dx", "count"]


@dataclass
class EvalReport:
    """Long-format metric rows plus the confusion counts behind them."""

    rows: pd.DataFrame
    counts: pd.DataFrame

    @classmethod
    def concat(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        return cls(
            pd.concat([r.rows for r in reports], ignore_index=True) if reports else pd.DataFrame(columns=REPORT_COLUMNS),
            pd.concat([r.counts for r in reports], ignore_index=True) if reports else pd.DataFrame(columns=COUNT_COLUMNS),
        )

    def value(self, metric: str, subset: str = "overall", group=ALL_GROUPS, fold: Optional[int] = None) -> float:
        r = self.rows
        sel = (r["metric"] == metric) & (r["subset"] == subset) & (r["group"].astype(str) == str(group))
        if fold is not None:
            sel &= r["fold"] == fold
        vals = r.loc[sel, "value"]
        if len(vals) != 1:
            raise KeyError(f"expected one row for {metric}/{subset}/{group}/{fold}, found {len(vals)}")
        return float(vals.iloc[0])

    def fold_values(self, metric: str, subset: str = "overall", group=ALL_GROUPS) -> np.ndarray:
        r = self.rows
        sel = (r["metric"] == metric) & (r["subset"] == subset) & (r["group"].astype(str) == str(group))
        return r.loc[sel].sort_values("fold")["value"].to_numpy(dtype=float)

    def aggregate(self) -> pd.DataFrame:
        return aggregate(self.rows)


def _slice_rows(fold, subset, group, probs, y, pred) -> tuple[list, list]:
    if len(y) == 0:
        names = ["n", "accuracy", "bca", "sensitivity", "specificity", "macro_f1", "mauc"]
        return [(fold, subset, group, m, float("nan"), "absent") for m in names], []
    cm = confusion_matrix(y, pred)
    suite = metric_suite(cm)
    flags = degenerate_classes(cm)
    mauc_value, skipped = mauc(probs, y, return_skipped=True)
    rows = [(fold, subset, group, "n", float(len(y)), "")]
    for name, value in suite.items():
        flag = ""
        if name in ("bca", "sensitivity", "specificity") and flags:
            flag = "degenerate:" + ",".join(flags)
        elif name.startswith(("sensitivity_", "specificity_")):
            kind, cls = name.split("_")
            tag = f"{'sens' if kind == 'sensitivity' else 'spec'}[{cls}]"
            flag = "degenerate" if tag in flags else ""
        rows.append((fold, subset, group, name, float(value), flag))
    mflag = "" if not skipped else "skipped:" + ",".join(f"{i}-{j}" for i, j in skipped)
    if np.isnan(mauc_value):
        mflag = "absent"
    rows.append((fold, subset, group, "mauc", float(mauc_value), mflag))
    counts = [(fold, subset, group, i, j, int(cm[i, j])) for i in range(N_CLASSES) for j in range(N_CLASSES)]
    return rows, counts


def evaluate(model, sequences: Sequence[VisitSequence], fold: int = 0,
             probs: Optional[np.ndarray] = None) -> EvalReport:
    """Metrics for overall/stable/converter subsets, pooled and per group.

    One forward pass produces the probability vectors; labels are their
    argmax, so mAUC and the count metrics share the same predictions.
    Empty slices get NaN values flagged ``absent``.
    """
    sequences = list(sequences)
    if probs is None:
        probs = softmax_rows(model.predict_logits(sequences)) if sequences else np.zeros((0, N_CLASSES))
    pred = predict_labels(probs)
    y = np.array([int(s.target_dx) for s in sequences], dtype=np.int64)
    label = np.array([s.label for s in sequences])
    group = np.array([s.group for s in sequences])
    rows, counts = [], []
    groups = sorted(set(group.tolist()))
    for subset in SUBSETS:
        in_subset = np.ones(len(y), bool) if subset == "overall" else label == subset
        for g in [ALL_GROUPS, *groups]:
            sel = in_subset if g == ALL_GROUPS else in_subset & (group == g)
            r, c = _slice_rows(fold, subset, str(g), probs[sel], y[sel], pred[sel])
            rows += r
            counts += c
    return EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS), pd.DataFrame(counts, columns=COUNT_COLUMNS))


def aggregate(rows: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample std (ddof=1) over the stored per-fold values; NaNs skipped."""
    out = []
    for (subset, group, metric), df in rows.groupby(["subset", "group", "metric"], sort=False):
        vals = df["value"].to_numpy(dtype=float)
        vals = vals[~np.isnan(vals)]
        mean = float(vals.mean()) if vals.size else float("nan")
        std = float(vals.std(ddof=1)) if vals.size > 1 else float("nan")
        out.append((subset, group, metric, mean, std, int(vals.size)))
    return pd.DataFrame(out, columns=["subset", "group", "metric", "mean", "std", "n_folds"])


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldOutcome:
    fold: int
    report: EvalReport
    checkpoint: bytes
    log: list
    best_epoch: int
    test_ids: list
    probabilities: np.ndarray


def run_fold(sequences: Sequence[VisitSequence], split: DatasetSplit, cfg: TrainConfig,
             transform: Optional[Callable] = None) -> FoldOutcome:
    """Prepare, train and evaluate one fold.

    ``transform`` (if given) maps a list of model-ready sequences to the
    sequences actually fed to the model, for ablations; it is applied
    identically to the train and test side.
    """
    train = [s for s in sequences if s.seq_id in split.train]
    test = sorted((s for s in sequences if s.seq_id in split.test), key=lambda s: s.seq_id)
    fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, "fold", split.fold_index) % 2**32,
                       filler=replace(cfg.filler, seed=derive_seed(cfg.seed, "filler", split.fold_index) % 2**32))
    data = prepare_fold(train, test, fold_cfg.filler)
    train_in, test_in = data.train, data.test
    if transform is not None:
        train_in, test_in = transform(train_in), transform(test_in)
    result = train_fold(train_in, fold_cfg)
    probs = softmax_rows(result.model.predict_logits(test_in)) if test_in else np.zeros((0, N_CLASSES))
    report = evaluate(result.model, test_in, fold=split.fold_index, probs=probs)
    meta = {"fold": split.fold_index, "best_epoch": result.best_epoch}
    return FoldOutcome(split.fold_index, report, result.checkpoint(meta), result.log, result.best_epoch,
                       [s.seq_id for s in test], probs)


def _run_fold_job(args):
    return run_fold(*args)


@dataclass
class CVResult:
    report: EvalReport
    outcomes: list

    @property
    def summary(self) -> pd.DataFrame:
        return self.report.aggregate()


def cross_validate(sequences: Sequence[VisitSequence], cfg: TrainConfig, k: int = 10,
                   split_seed: int = 0, jobs: int = 1, folds: Optional[Sequence[int]] = None,
                   splits: Optional[Sequence[DatasetSplit]] = None,
                   transform: Optional[Callable] = None) -> CVResult:
    """k-fold CV. Results do not depend on ``jobs``; only wall time does."""
    sequences = list(sequences)
    if splits is None:
        splits = stratified_kfold(sequences, k=k, seed=split_seed)
    if folds is not None:
        splits = [splits[i] for i in folds]
    jobs_args = [(sequences, sp, cfg, transform) for sp in splits]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold_job, jobs_args))
    else:
        outcomes = [run_fold(*a) for a in jobs_args]
    return CVResult(EvalReport.concat([o.report for o in outcomes]), outcomes)


def grid_search(sequences: Sequence[VisitSequence], cfg: TrainConfig, k: int = 10, split_seed: int = 0,
                folds: Optional[Sequence[int]] = None) -> tuple[TrainConfig, pd.DataFrame]:
    """Pick the grid point with the best mean validation BCA across folds.

    Keys that do not apply to ``cfg.model_kind`` (``hidden_dim`` for the
    Transformer, ``d_ffn`` for recurrent models) are ignored.
    """
    grid = {key: tuple(vals) for key, vals in (cfg.grid or DEFAULT_GRID).items()
            if key not in _GRID_TARGET or cfg.model_kind in _GRID_TARGET[key]}
    splits = stratified_kfold(list(sequences), k=k, seed=split_seed)
    if folds is not None:
        splits = [splits[i] for i in folds]
    keys = sorted(grid)
    prepared = []
    for sp in splits:
        train = [s for s in sequences if s.seq_id in sp.train]
        filler = replace(cfg.filler, seed=derive_seed(cfg.seed, "filler", sp.fold_index) % 2**32)
        prepared.append((sp.fold_index, prepare_fold(train, [], filler).train))
    rows = []
    best_cfg, best_score = cfg, -np.inf
    for combo in itertools.product(*(grid[k_] for k_ in keys)):
        point = dict(zip(keys, combo))
        options = {**cfg.model_options, **{k_: v for k_, v in point.items() if k_ != "lr"}}
        trial = replace(cfg, model_options=options, lr=float(point.get("lr", cfg.lr)), grid=None)
        scores = []
        for fold, train in prepared:
            fold_cfg = replace(trial, seed=derive_seed(cfg.seed, "fold", fold) % 2**32)
            scores.append(train_fold(train, fold_cfg).best_val_bca)
        mean = float(np.mean(scores))
        rows.append({**point, "mean_val_bca": mean})
        if mean > best_score:
            best_cfg, best_score = trial, mean
    return best_cfg, pd.DataFrame(rows)


def pvalue_matrix(fold_values: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Welch two-sided p-value for every ordered pair of models (1 on the diagonal)."""
    names = list(fold_values)
    mat = np.ones((len(names), len(names)))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if i != j:
                mat[i, j] = welch_t_test(fold_values[a], fold_values[b]).p
    return pd.DataFrame(mat, index=names, columns=names)


def load_fold_model(checkpoint: bytes, dtype=np.float32):
    config, tensors = nc.parse_checkpoint(checkpoint)
    return model_from_state(config, tensors, dtype)
