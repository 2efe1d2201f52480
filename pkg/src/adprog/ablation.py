"""Visit-history truncation and feature-category ablation studies."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .data_model import CATEGORIES, FEATURE_KEYS, category_keys
from .preprocess import add_months_to_final
from .sequences import VisitSequence, stratified_kfold
from .training import CVResult, TrainConfig, cross_validate

ABLATION_KINDS = ("remove_category", "isolate_category", "history_last_k")
REPORT_COLUMNS = ["spec_kind", "detail", "mean_bca", "std_bca", "pct_change_vs_baseline"]


@dataclass(frozen=True)
class AblationSpec:
    kind: str
    category: Optional[str] = None
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        if self.kind == "history_last_k":
            if self.k is None or self.k < 1 or self.category is not None:
                raise ValueError("history_last_k needs a positive k and no category")
        else:
            if self.category not in CATEGORIES or self.k is not None:
                raise ValueError(f"{self.kind} needs a category in {CATEGORIES} and no k")

    @property
    def detail(self) -> str:
        return f"k={self.k}" if self.kind == "history_last_k" else str(self.category)


def feature_channels(kind: str, category: str) -> tuple[str, ...]:
    """Feature keys kept as model input, in canonical order."""
    members = set(category_keys(category))
    if kind == "remove_category":
        return tuple(k for k in FEATURE_KEYS if k not in members)
    if kind == "isolate_category":
        return tuple(k for k in FEATURE_KEYS if k in members)
    raise ValueError(f"{kind!r} is not a feature ablation")


def apply_feature_mask(sequences: Sequence[VisitSequence], kind: str, category: str) -> list[VisitSequence]:
    """Drop the excluded feature channels from every visit.

    Diagnosis and time inputs are derived from the visit itself and are
    always retained. The same call is used on train and test data.
    """
    keep = feature_channels(kind, category)
    out = []
    for s in sequences:
        visits = tuple(v.with_features({k: v.features.get(k) for k in keep}) for v in s.visits)
        out.append(replace(s, visits=visits))
    return out


def truncate_history(sequence: VisitSequence, k: int) -> VisitSequence:
    """Keep the last ``k`` input visits and the target; group and months-to-final are recomputed."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(sequence.visits) - 1 <= k:
        return sequence
    return add_months_to_final(sequence.with_visits(sequence.visits[-(k + 1):]))


def pct_change(ablated: float, baseline: float) -> float:
    """Relative change in percent: 100 * (ablated - baseline) / baseline."""
    if baseline == 0:
        raise ZeroDivisionError("baseline BCA is 0; percent change undefined")
    return 100.0 * (ablated - baseline) / baseline


@dataclass
class _FeatureMask:
    kind: str
    category: str

    def __call__(self, sequences):
        return apply_feature_mask(sequences, self.kind, self.category)


def run_spec(sequences: Sequence[VisitSequence], spec: AblationSpec, cfg: TrainConfig, splits,
             folds=None, jobs: int = 1) -> CVResult:
    """Cross-validate a freshly trained model under one ablation.

    Fold assignment is the one passed in (computed on the full data), so
    ablated and baseline runs see the same subjects in every test fold.
    """
    if spec.kind == "history_last_k":
        seqs = [truncate_history(s, spec.k) for s in sequences]
        return cross_validate(seqs, cfg, splits=splits, folds=folds, jobs=jobs)
    keep = feature_channels(spec.kind, spec.category)
    spec_cfg = replace(cfg, model_options={**cfg.model_options, "feature_keys": keep})
    return cross_validate(sequences, spec_cfg, splits=splits, folds=folds, jobs=jobs,
                          transform=_FeatureMask(spec.kind, spec.category))


def _bca_stats(result: CVResult, metric: str = "bca") -> tuple[float, float]:
    vals = result.report.fold_values(metric)
    vals = vals[~np.isnan(vals)]
    std = float(vals.std(ddof=1)) if vals.size > 1 else float("nan")
    return float(vals.mean()), std


def run_ablation_suite(sequences: Sequence[VisitSequence], specs: Sequence[AblationSpec], cfg: TrainConfig,
                       k: int = 10, split_seed: int = 0, folds=None, jobs: int = 1,
                       baseline: Optional[CVResult] = None) -> tuple[pd.DataFrame, dict]:
    """Run every spec and tabulate BCA against the unablated baseline.

    Returns ``(report, results)`` where ``report`` has one row per spec and
    ``results`` maps ``"baseline"`` and each spec's ``(kind, detail)`` to its
    :class:`CVResult`.
    """
    sequences = list(sequences)
    splits = stratified_kfold(sequences, k=k, seed=split_seed)
    if baseline is None:
        baseline = cross_validate(sequences, cfg, splits=splits, folds=folds, jobs=jobs)
    base_mean, _ = _bca_stats(baseline)
    results = {"baseline": baseline}
    rows = []
    for spec in specs:
        res = run_spec(sequences, spec, cfg, splits, folds=folds, jobs=jobs)
        results[(spec.kind, spec.detail)] = res
        mean, std = _bca_stats(res)
        rows.append((spec.kind, spec.detail, mean, std, pct_change(mean, base_mean)))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS), results


def category_suite(kind: str) -> list[AblationSpec]:
    return [AblationSpec(kind, category=c) for c in CATEGORIES]
