"""Domain types shared across the pipeline.

Visits carry a diagnosis and the 22 numeric TADPOLE features used as model
inputs. Everything here is immutable after construction.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np


class Diagnosis(enum.IntEnum):
    """Clinical diagnosis; integer value is the severity rank."""

    CN = 0
    MCI = 1
    AD = 2

    @classmethod
    def parse(cls, text: str) -> Optional["Diagnosis"]:
        """Parse a DX cell. Empty string means missing.

        Legacy TADPOLE spellings (``NL``, ``Dementia``, ``NL to MCI`` ...) are
        normalized; transitional values map to the destination stage.
        """
        text = text.strip()
        if not text:
            return None
        if " to " in text:
            text = text.split(" to ")[-1].strip()
        try:
            return _DX_ALIASES[text.upper()]
        except KeyError:
            raise ValueError(f"unknown diagnosis {text!r}") from None


_DX_ALIASES = {
    "CN": Diagnosis.CN,
    "NL": Diagnosis.CN,
    "MCI": Diagnosis.MCI,
    "AD": Diagnosis.AD,
    "DEMENTIA": Diagnosis.AD,
}

N_CLASSES = len(Diagnosis)
CATEGORIES = ("Cognitive", "MRI", "Biomarker")


@dataclass(frozen=True)
class FeatureSpec:
    key: str
    category: str
    population_mean: float
    population_std: float
    missingness_target: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.key}: unknown category {self.category!r}")
        if not self.population_std > 0:
            raise ValueError(f"{self.key}: population_std must be positive")
        if not 0 <= self.missingness_target < 1:
            raise ValueError(f"{self.key}: missingness_target must lie in [0, 1)")


# Table of TADPOLE features: mean, std and fraction missing in the full cohort.
FEATURES: tuple[FeatureSpec, ...] = (
    FeatureSpec("CDRSB", "Cognitive", 1.83, 2.29, 0.2964),
    FeatureSpec("ADAS11", "Cognitive", 10.74, 7.76, 0.3005),
    FeatureSpec("ADAS13", "Cognitive", 16.62, 10.68, 0.3072),
    FeatureSpec("MMSE", "Cognitive", 26.92, 3.5, 0.2988),
    FeatureSpec("RAVLT_immediate", "Cognitive", 35.08, 13.24, 0.3067),
    FeatureSpec("RAVLT_learning", "Cognitive", 4.14, 2.81, 0.3067),
    FeatureSpec("RAVLT_forgetting", "Cognitive", 4.26, 2.55, 0.3088),
    FeatureSpec("RAVLT_perc_forgetting", "Cognitive", 58.73, 37.57, 0.3143),
    FeatureSpec("MOCA", "Cognitive", 23.52, 4.18, 0.6101),
    FeatureSpec("FAQ", "Cognitive", 4.65, 6.96, 0.2940),
    FeatureSpec("Ventricles", "MRI", 42119.98, 23274.12, 0.4156),
    FeatureSpec("Hippocampus", "MRI", 6684.54, 1224.13, 0.4661),
    FeatureSpec("WholeBrain", "MRI", 1010781.21, 111280.94, 0.3965),
    FeatureSpec("Entorhinal", "MRI", 3455.9, 801.46, 0.4922),
    FeatureSpec("Fusiform", "MRI", 17117.41, 2798.63, 0.4922),
    FeatureSpec("MidTemp", "MRI", 19206.76, 3098.07, 0.4922),
    FeatureSpec("ICV", "MRI", 1534699.07, 164732.93, 0.3757),
    FeatureSpec("FDG", "Biomarker", 1.21, 0.16, 0.7369),
    FeatureSpec("AV45", "Biomarker", 1.19, 0.22, 0.8338),
    FeatureSpec("ABETA", "Biomarker", 1052.48, 502.57, 0.8140),
    FeatureSpec("TAU", "Biomarker", 288.67, 105.95, 0.8145),
    FeatureSpec("PTAU", "Biomarker", 27.59, 11.7, 0.8138),
)
FEATURE_KEYS: tuple[str, ...] = tuple(f.key for f in FEATURES)
FEATURE_INDEX = MappingProxyType({k: i for i, k in enumerate(FEATURE_KEYS)})
FEATURES_BY_KEY = MappingProxyType({f.key: f for f in FEATURES})
DX_MISSINGNESS = 0.3011


def category_keys(category: str) -> tuple[str, ...]:
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    return tuple(f.key for f in FEATURES if f.category == category)


@dataclass(frozen=True)
class VisitRecord:
    subject_id: str
    exam_month: int
    diagnosis: Optional[Diagnosis]
    features: Mapping[str, Optional[float]]
    months_to_final: Optional[float] = None

    def __post_init__(self):
        # read-only view; callers build a fresh dict per record
        if not isinstance(self.features, MappingProxyType):
            object.__setattr__(self, "features", MappingProxyType(dict(self.features)))

    def feature_array(self, keys: Sequence[str] = FEATURE_KEYS) -> np.ndarray:
        """Feature values in ``keys`` order, NaN where absent."""
        return np.array(
            [np.nan if self.features.get(k) is None else self.features[k] for k in keys],
            dtype=np.float64,
        )

    def with_features(self, values: Mapping[str, Optional[float]]) -> "VisitRecord":
        return replace(self, features=MappingProxyType(dict(values)))

    def __reduce__(self):
        return (
            _rebuild_visit,
            (self.subject_id, self.exam_month, self.diagnosis, dict(self.features), self.months_to_final),
        )


def _rebuild_visit(subject_id, exam_month, diagnosis, features, months_to_final):
    return VisitRecord(subject_id, exam_month, diagnosis, features, months_to_final)


def make_visit(
    subject_id: str,
    exam_month: int,
    diagnosis: Optional[Diagnosis],
    values: Optional[Mapping[str, Optional[float]]] = None,
) -> VisitRecord:
    """Build a visit with every feature key present (absent unless given)."""
    feats: dict[str, Optional[float]] = dict.fromkeys(FEATURE_KEYS)
    if values:
        unknown = set(values) - set(FEATURE_KEYS)
        if unknown:
            raise KeyError(f"unknown feature keys {sorted(unknown)}")
        feats.update(values)
    return VisitRecord(subject_id, int(exam_month), diagnosis, feats)


def visit_from_array(
    subject_id: str, exam_month: int, diagnosis: Optional[Diagnosis], values: np.ndarray
) -> VisitRecord:
    feats = {k: (None if np.isnan(v) else float(v)) for k, v in zip(FEATURE_KEYS, values)}
    return VisitRecord(subject_id, int(exam_month), diagnosis, feats)


@dataclass(frozen=True)
class SubjectHistory:
    subject_id: str
    visits: tuple[VisitRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))

    def __len__(self) -> int:
        return len(self.visits)

    @property
    def diagnoses(self) -> list[Optional[Diagnosis]]:
        return [v.diagnosis for v in self.visits]

    @property
    def months(self) -> list[int]:
        return [v.exam_month for v in self.visits]


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_history(h: SubjectHistory) -> ValidationResult:
    """Collect every invariant violation of a subject history."""
    problems: list[str] = []
    if len(h.visits) < 1:
        problems.append("empty history")
    months = h.months
    if len(set(months)) != len(months):
        problems.append("duplicate exam_month")
    if any(b < a for a, b in zip(months, months[1:])):
        problems.append("visits not sorted by exam_month")
    expected = set(FEATURE_KEYS)
    for i, v in enumerate(h.visits):
        if v.subject_id != h.subject_id:
            problems.append(f"visit {i}: subject_id {v.subject_id!r} != {h.subject_id!r}")
        if set(v.features) != expected:
            problems.append(f"visit {i}: feature key set mismatch")
        if v.months_to_final is not None and v.months_to_final < 0:
            problems.append(f"visit {i}: negative months_to_final")
    return ValidationResult(tuple(problems))


def history_matrix(visits: Iterable[VisitRecord], keys: Sequence[str] = FEATURE_KEYS) -> np.ndarray:
    """Stack visit features into an (n_visits, n_keys) array with NaN holes."""
    rows = [v.feature_array(keys) for v in visits]
    if not rows:
        return np.empty((0, len(keys)))
    return np.vstack(rows)
