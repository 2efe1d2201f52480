"""Stable/converter sequence extraction, balancing and group-stratified folds."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .data_model import Diagnosis, SubjectHistory, VisitRecord

STABLE = "stable"
CONVERTER = "converter"
CONVERSION_KINDS = ("CN->MCI", "CN->AD", "MCI->AD")
MAX_SEQUENCE_VISITS = 9


@dataclass(frozen=True)
class VisitSequence:
    """Visits ``v_1..v_n`` plus the target visit ``v_{n+1}`` (last element)."""

    subject_id: str
    visits: tuple[VisitRecord, ...]
    label: str
    conversion_kind: Optional[str]
    group: int
    target_dx: Diagnosis

    @property
    def seq_id(self) -> str:
        return self.subject_id

    @property
    def is_converter(self) -> bool:
        return self.label == CONVERTER

    @property
    def penultimate_dx(self) -> Diagnosis:
        return self.visits[-2].diagnosis

    @property
    def inputs(self) -> tuple[VisitRecord, ...]:
        return self.visits[:-1]

    def with_visits(self, visits: Sequence[VisitRecord]) -> "VisitSequence":
        """Same subject and target with a different visit list; group recomputed."""
        return make_sequence(self.subject_id, tuple(visits))

    def as_history(self) -> SubjectHistory:
        return SubjectHistory(self.subject_id, self.visits)


def make_sequence(subject_id: str, visits: Sequence[VisitRecord]) -> VisitSequence:
    visits = tuple(visits)
    if len(visits) < 2:
        raise ValueError("a sequence needs at least two visits")
    last, prev = visits[-1].diagnosis, visits[-2].diagnosis
    if last is None or prev is None:
        raise ValueError("sequence endpoints need a diagnosis")
    if last > prev:
        label, kind = CONVERTER, f"{prev.name}->{last.name}"
    elif last == prev:
        label, kind = STABLE, None
    else:
        raise ValueError(f"subject {subject_id}: diagnosis decreases at the target visit")
    return VisitSequence(subject_id, visits, label, kind, len(visits) - 1, last)


@dataclass(frozen=True)
class DatasetSplit:
    fold_index: int
    train: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.test:
            raise ValueError("train and test overlap")


def extract_sequences(histories: Iterable[SubjectHistory],
                      max_visits: int = MAX_SEQUENCE_VISITS) -> list[VisitSequence]:
    """One maximal-length sequence per cleaned subject history.

    A history containing a conversion yields the prefix ending at its first
    conversion visit; otherwise the whole history is a stable sequence.
    Sequences longer than ``max_visits`` keep their most recent visits.
    """
    out = []
    for h in histories:
        visits = list(h.visits)
        dx = [v.diagnosis for v in visits]
        end = len(visits)
        for i in range(1, len(visits)):
            if dx[i] > dx[i - 1]:
                end = i + 1
                break
        visits = visits[:end]
        if len(visits) > max_visits:
            visits = visits[-max_visits:]
        out.append(make_sequence(h.subject_id, visits))
    return out


def balance(sequences: Sequence[VisitSequence], seed: int) -> list[VisitSequence]:
    """Per group, randomly discard stable sequences down to the converter count."""
    rng = np.random.default_rng(seed)
    by_group: dict[int, list[int]] = defaultdict(list)
    conv_count: Counter = Counter()
    for i, s in enumerate(sequences):
        if s.is_converter:
            conv_count[s.group] += 1
        else:
            by_group[s.group].append(i)
    keep = set(i for i, s in enumerate(sequences) if s.is_converter)
    for group in sorted(by_group):
        stable_idx = by_group[group]
        n_keep = min(len(stable_idx), conv_count[group])
        if n_keep:
            chosen = rng.choice(len(stable_idx), size=n_keep, replace=False)
            keep.update(stable_idx[j] for j in chosen)
    return [s for i, s in enumerate(sequences) if i in keep]


def stratified_kfold(sequences: Sequence[VisitSequence], k: int = 10, seed: int = 0) -> list[DatasetSplit]:
    """Group-stratified k-fold partition of sequence ids.

    Within each group the shuffled sequences are dealt round-robin, so every
    fold tests floor(n/k) or ceil(n/k) of that group. The starting fold
    rotates between groups to even out total fold sizes. Groups smaller
    than ``k`` leave some folds without a test sequence from that group.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    ids = [s.seq_id for s in sequences]
    if len(set(ids)) != len(ids):
        raise ValueError("sequence ids must be unique")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[str]] = defaultdict(list)
    for s in sequences:
        groups[s.group].append(s.seq_id)
    test_sets: list[set] = [set() for _ in range(k)]
    offset = 0
    for group in sorted(groups):
        members = groups[group]
        order = rng.permutation(len(members))
        for pos, j in enumerate(order):
            test_sets[(offset + pos) % k].add(members[j])
        offset = (offset + len(members)) % k
    everything = frozenset(ids)
    return [DatasetSplit(f, everything - frozenset(t), frozenset(t)) for f, t in enumerate(test_sets)]


def validation_carve_out(sequences: Sequence[VisitSequence], seed: int, fraction_folds: int = 10):
    """Split into (train, validation) with ~1/fraction_folds of each group held out."""
    if len(sequences) < 2:
        return list(sequences), []
    split = stratified_kfold(sequences, k=fraction_folds, seed=seed)[0]
    train = [s for s in sequences if s.seq_id in split.train]
    val = [s for s in sequences if s.seq_id in split.test]
    return train, val


@dataclass(frozen=True)
class CountSummary:
    table: pd.DataFrame

    @property
    def stable(self) -> int:
        return int(self.table["stable"].sum())

    @property
    def converter(self) -> int:
        return int(self.table["converter"].sum())

    def kind(self, kind: str) -> int:
        return int(self.table[kind].sum())

    def group(self, g: int) -> dict:
        rows = self.table[self.table["group"] == g]
        if rows.empty:
            return {c: 0 for c in self.table.columns if c != "group"}
        return {c: int(rows.iloc[0][c]) for c in self.table.columns if c != "group"}


SUMMARY_COLUMNS = ("group", "stable", "converter", *CONVERSION_KINDS,
                   "target_CN", "target_MCI", "target_AD", "total")


def count_summary(sequences: Iterable[VisitSequence]) -> CountSummary:
    """Per-group counts by label, conversion kind and target diagnosis."""
    rows: dict[int, Counter] = defaultdict(Counter)
    for s in sequences:
        c = rows[s.group]
        c[s.label] += 1
        if s.conversion_kind:
            c[s.conversion_kind] += 1
        c[f"target_{s.target_dx.name}"] += 1
        c["total"] += 1
    records = [{"group": g, **{col: int(rows[g][col]) for col in SUMMARY_COLUMNS[1:]}} for g in sorted(rows)]
    table = pd.DataFrame.from_records(records, columns=list(SUMMARY_COLUMNS))
    if table.empty:
        table = pd.DataFrame({c: pd.Series(dtype=int) for c in SUMMARY_COLUMNS})
    return CountSummary(table.astype(int))


def manifest_frame(sequences: Iterable[VisitSequence]) -> pd.DataFrame:
    return pd.DataFrame.from_records(
        [
            {
                "seq_id": s.seq_id,
                "subject_id": s.subject_id,
                "group": s.group,
                "label": s.label,
                "conversion_kind": s.conversion_kind or "",
                "target_dx": s.target_dx.name,
                "n_visits": len(s.visits),
            }
            for s in sequences
        ],
        columns=["seq_id", "subject_id", "group", "label", "conversion_kind", "target_dx", "n_visits"],
    )


def folds_frame(splits: Sequence[DatasetSplit]) -> pd.DataFrame:
    rows = [{"seq_id": sid, "fold": sp.fold_index} for sp in splits for sid in sorted(sp.test)]
    return pd.DataFrame.from_records(rows, columns=["seq_id", "fold"]).sort_values(["fold", "seq_id"]).reset_index(drop=True)


def splits_from_frame(frame: pd.DataFrame, all_ids: Iterable[str]) -> list[DatasetSplit]:
    everything = frozenset(all_ids)
    out = []
    for fold in sorted(frame["fold"].unique()):
        test = frozenset(frame.loc[frame["fold"] == fold, "seq_id"].astype(str))
        out.append(DatasetSplit(int(fold), everything - test, test))
    return out
