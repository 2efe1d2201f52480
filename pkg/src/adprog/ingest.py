"""Cohort sources: TADPOLE-style CSV files and a synthetic generator.

The synthetic cohort plants a learnable pre-conversion drift in the
feature categories selected by ``SynthConfig.category_signal`` and masks
features at each feature's target missingness rate (see ``FeatureSpec``).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data_model import (
    CATEGORIES,
    FEATURE_KEYS,
    FEATURES,
    Diagnosis,
    FeatureSpec,
    SubjectHistory,
    VisitRecord,
    make_visit,
)

REQUIRED_ID_COLUMNS = ("RID", "EXAMDATE", "DX")
_EPOCH_YEAR = 1970


class CohortFormatError(ValueError):
    """Raised when a cohort file violates the expected CSV layout."""


def date_to_month(text: str) -> int:
    """``YYYY-MM-DD`` -> integer months since 1970-01 (day discarded)."""
    parts = text.strip().split("-")
    if len(parts) < 2:
        raise ValueError(f"bad date {text!r}")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12:
        raise ValueError(f"bad month in {text!r}")
    return (year - _EPOCH_YEAR) * 12 + (month - 1)


def month_to_date(month: int) -> str:
    year, m = divmod(int(month), 12)
    return f"{year + _EPOCH_YEAR:04d}-{m + 1:02d}-01"


def _parse_float(cell: str) -> Optional[float]:
    try:
        value = float(cell)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def load_csv(path: Union[str, Path], spec: Sequence[FeatureSpec] = FEATURES) -> list[SubjectHistory]:
    """Read a cohort file into one sorted history per subject.

    Lines starting with ``#`` before the header are skipped. Empty or
    unparseable feature cells become absent values.
    """
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        lines = fh.readlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    frame = pd.read_csv(
        io.StringIO("".join(body)), dtype=str, keep_default_na=False, skipinitialspace=False
    )
    keys = [f.key for f in spec]
    for col in (*REQUIRED_ID_COLUMNS, *keys):
        if col not in frame.columns:
            raise CohortFormatError(f"missing column {col}")

    by_subject: dict[str, dict[int, VisitRecord]] = {}
    for row_no, row in enumerate(frame.itertuples(index=False), start=2):
        rec = row._asdict() if hasattr(row, "_asdict") else dict(zip(frame.columns, row))
        rid = str(rec["RID"]).strip()
        try:
            month = date_to_month(rec["EXAMDATE"])
        except ValueError as exc:
            raise CohortFormatError(f"row {row_no}: {exc}") from None
        try:
            dx = Diagnosis.parse(rec["DX"])
        except ValueError as exc:
            raise CohortFormatError(f"row {row_no}: {exc}") from None
        values = {k: _parse_float(rec[k]) for k in keys}
        visits = by_subject.setdefault(rid, {})
        if month in visits:
            raise CohortFormatError(
                f"row {row_no}: duplicate visit for subject {rid} at {rec['EXAMDATE']}"
            )
        visits[month] = make_visit(rid, month, dx, values)

    return [
        SubjectHistory(rid, tuple(v for _, v in sorted(visits.items())))
        for rid, visits in by_subject.items()
    ]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def histories_to_csv(histories: Iterable[SubjectHistory], header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*REQUIRED_ID_COLUMNS, *FEATURE_KEYS])
    for h in histories:
        for v in h.visits:
            dx = "" if v.diagnosis is None else v.diagnosis.name
            writer.writerow(
                [h.subject_id, month_to_date(v.exam_month), dx, *(_fmt(v.features[k]) for k in FEATURE_KEYS)]
            )
    return buf.getvalue()


def write_csv(histories: Iterable[SubjectHistory], path: Union[str, Path], header_comment: Optional[str] = None) -> None:
    Path(path).write_text(histories_to_csv(histories, header_comment), encoding="utf-8")


# --------------------------------------------------------------------------
# synthetic cohorts

# Sign of each feature's change as disease severity increases.
SEVERITY_DIRECTION: Mapping[str, float] = {
    "CDRSB": 1, "ADAS11": 1, "ADAS13": 1, "MMSE": -1,
    "RAVLT_immediate": -1, "RAVLT_learning": -1, "RAVLT_forgetting": 1,
    "RAVLT_perc_forgetting": 1, "MOCA": -1, "FAQ": 1,
    "Ventricles": 1, "Hippocampus": -1, "WholeBrain": -1, "Entorhinal": -1,
    "Fusiform": -1, "MidTemp": -1, "ICV": 0,
    "FDG": -1, "AV45": 1, "ABETA": -1, "TAU": 1, "PTAU": 1,
}


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 400
    converter_fraction: float = 0.25
    cn_to_mci_fraction_of_converters: float = 0.5
    visit_interval_months: int = 6
    max_visits: int = 8
    missingness: Mapping[str, float] = field(
        default_factory=lambda: {f.key: f.missingness_target for f in FEATURES}
    )
    signal_strength: float = 1.0  # severity effect per diagnosis step, in population-std units
    rng_seed: int = 0
    gap_jitter: bool = False
    # per-category multiplier on the severity effect
    category_signal: Mapping[str, float] = field(
        default_factory=lambda: {"Cognitive": 1.0, "MRI": 0.0, "Biomarker": 0.0}
    )
    baseline_dx_weights: tuple[float, float, float] = (0.35, 0.4, 0.25)
    reverter_fraction: float = 0.0
    multi_converter_fraction: float = 0.0
    subject_effect_std: float = 0.35  # per-subject offset, population-std units
    noise_std: float = 0.3
    ar_coef: float = 0.5

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise ValueError("n_subjects must be positive")
        for name in ("converter_fraction", "cn_to_mci_fraction_of_converters",
                     "reverter_fraction", "multi_converter_fraction"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.converter_fraction + self.reverter_fraction + self.multi_converter_fraction > 1:
            raise ValueError("subject-type fractions sum above 1")
        if self.max_visits < 2:
            raise ValueError("max_visits must be >= 2")
        if self.visit_interval_months <= 0:
            raise ValueError("visit_interval_months must be positive")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be non-negative")
        for key, rate in self.missingness.items():
            if key not in FEATURE_KEYS:
                raise ValueError(f"unknown feature {key!r} in missingness")
            if not 0 <= rate < 1:
                raise ValueError(f"missingness[{key}] must lie in [0, 1)")
        if set(self.category_signal) - set(CATEGORIES):
            raise ValueError("unknown category in category_signal")

    def with_missingness(self, **rates: float) -> "SynthConfig":
        merged = dict(self.missingness)
        merged.update(rates)
        return replace(self, missingness=merged)


def _severity_path(kind: str, n_visits: int, start: int, change_at: Optional[int],
                   second_change_at: Optional[int]) -> np.ndarray:
    """Latent severity per visit; ramps over the 2 visits before each conversion."""
    sev = np.full(n_visits, float(start))
    if kind == "reverter":
        sev[change_at:] = start - 1
        return sev
    for at in (change_at, second_change_at):
        if at is None:
            continue
        idx = np.arange(n_visits)
        # +1/3 two visits before, +2/3 one visit before, +1 from the conversion on
        sev += np.clip((idx - at + 3) / 3.0, 0.0, 1.0)
    return sev


def _dx_path(kind: str, n_visits: int, start: int, change_at: Optional[int],
             second_change_at: Optional[int]) -> list[Diagnosis]:
    dx = [start] * n_visits
    if change_at is not None:
        step = -1 if kind == "reverter" else 1
        for i in range(change_at, n_visits):
            dx[i] = start + step
    if second_change_at is not None:
        for i in range(second_change_at, n_visits):
            dx[i] = start + 2
    return [Diagnosis(d) for d in dx]


def generate_synthetic(cfg: SynthConfig) -> list[SubjectHistory]:
    """Deterministic synthetic cohort for desk-scale experiments.

    Subject types: ``round(n * converter_fraction)`` single converters
    (CN->MCI or MCI->AD, split by ``cn_to_mci_fraction_of_converters``),
    optional reverters and double converters, the rest stable.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.n_subjects
    n_conv = int(round(n * cfg.converter_fraction))
    n_multi = int(round(n * cfg.multi_converter_fraction))
    n_rev = int(round(n * cfg.reverter_fraction))
    n_conv = min(n_conv, n)
    n_multi = min(n_multi, n - n_conv)
    n_rev = min(n_rev, n - n_conv - n_multi)
    n_cn_mci = int(round(n_conv * cfg.cn_to_mci_fraction_of_converters))

    kinds = (["conv_cn"] * n_cn_mci + ["conv_mci"] * (n_conv - n_cn_mci)
             + ["multi"] * n_multi + ["reverter"] * n_rev
             + ["stable"] * (n - n_conv - n_multi - n_rev))
    kinds = [kinds[i] for i in rng.permutation(n)]

    weights = np.asarray(cfg.baseline_dx_weights, dtype=float)
    weights = weights / weights.sum()
    effect = np.array([
        SEVERITY_DIRECTION[f.key] * cfg.category_signal.get(f.category, 0.0) * cfg.signal_strength
        for f in FEATURES
    ])
    offset_dir = np.sign(effect)
    means = np.array([f.population_mean for f in FEATURES])
    stds = np.array([f.population_std for f in FEATURES])
    miss = np.array([cfg.missingness.get(k, 0.0) for k in FEATURE_KEYS])
    innovation = cfg.noise_std * math.sqrt(1 - cfg.ar_coef ** 2)

    histories = []
    width = len(str(n))
    for s, kind in enumerate(kinds):
        sid = f"S{s:0{width}d}"
        min_visits = 3 if kind == "multi" else 2
        n_visits = int(rng.integers(min_visits, max(cfg.max_visits, min_visits) + 1))
        change_at = second = None
        if kind == "conv_cn":
            start = 0
        elif kind == "conv_mci":
            start = 1
        elif kind == "multi":
            start = 0
        elif kind == "reverter":
            start = int(rng.integers(1, 3))
        else:
            start = int(rng.choice(3, p=weights))
        if kind in ("conv_cn", "conv_mci", "reverter"):
            change_at = int(rng.integers(1, n_visits))
        elif kind == "multi":
            change_at = int(rng.integers(1, n_visits - 1))
            second = int(rng.integers(change_at + 1, n_visits))
        sev = _severity_path(kind, n_visits, start, change_at, second)
        dx = _dx_path(kind, n_visits, start, change_at, second)

        if cfg.gap_jitter:
            gaps = rng.choice([6, 12, 18], size=n_visits - 1, p=[0.6, 0.3, 0.1])
        else:
            gaps = np.full(n_visits - 1, cfg.visit_interval_months)
        first = int(rng.integers(420, 480))  # 2005..2009
        months = first + np.concatenate([[0], np.cumsum(gaps)]).astype(int)

        # subject-level offset along the severity direction (standardised units, independent of the
        # planted effect so that signal_strength sets the signal-to-noise ratio), AR(1) noise per feature
        offset = rng.normal(0.0, cfg.subject_effect_std)
        noise = np.empty((n_visits, len(FEATURES)))
        noise[0] = rng.normal(0.0, cfg.noise_std, len(FEATURES))
        for t in range(1, n_visits):
            noise[t] = cfg.ar_coef * noise[t - 1] + rng.normal(0.0, innovation, len(FEATURES))
        z = effect[None, :] * (sev[:, None] - 1.0) + offset_dir[None, :] * offset + noise
        values = means + stds * z
        mask = rng.random((n_visits, len(FEATURES))) < miss[None, :]
        values[mask] = np.nan

        visits = []
        for t in range(n_visits):
            feats = {k: (None if np.isnan(x) else float(x)) for k, x in zip(FEATURE_KEYS, values[t])}
            visits.append(make_visit(sid, int(months[t]), dx[t], feats))
        histories.append(SubjectHistory(sid, tuple(visits)))
    return histories


def corrupt_diagnoses(histories: Sequence[SubjectHistory], fraction: float, seed: int) -> list[SubjectHistory]:
    """Mask exactly ``floor(fraction * total_visits)`` diagnoses, uniformly at random."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    total = sum(len(h.visits) for h in histories)
    n_mask = int(math.floor(fraction * total))
    if n_mask == 0:
        return list(histories)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(total, size=n_mask, replace=False).tolist())
    out = []
    pos = 0
    for h in histories:
        visits = []
        for v in h.visits:
            visits.append(replace(v, diagnosis=None) if pos in chosen else v)
            pos += 1
        out.append(SubjectHistory(h.subject_id, tuple(visits)))
    return out
