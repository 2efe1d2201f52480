"""Turn visit sequences into padded arrays for the sequence models.

A visit vector is ``[one-hot DX (3) | features | time]`` where the time
channel is months until the sequence's final (target) visit, in years.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..data_model import FEATURE_KEYS, N_CLASSES, Diagnosis, VisitRecord

TIME_SCALE = 12.0


@dataclass(frozen=True)
class InputLayout:
    feature_keys: tuple[str, ...] = FEATURE_KEYS

    def __post_init__(self):
        object.__setattr__(self, "feature_keys", tuple(self.feature_keys))
        unknown = set(self.feature_keys) - set(FEATURE_KEYS)
        if unknown:
            raise KeyError(f"unknown feature keys {sorted(unknown)}")

    @property
    def n_features(self) -> int:
        return len(self.feature_keys)

    @property
    def in_dim(self) -> int:
        return N_CLASSES + self.n_features + 1

    @property
    def out_dim(self) -> int:
        return N_CLASSES + self.n_features


def dx_onehot(dx: Optional[Diagnosis]) -> np.ndarray:
    out = np.zeros(N_CLASSES)
    if dx is not None:
        out[int(dx)] = 1.0
    return out


def visit_vector(visit: VisitRecord, layout: InputLayout, months_to_final: float) -> np.ndarray:
    feats = visit.feature_array(layout.feature_keys)
    # absent after imputation only if a caller skipped it; 0 is the training mean
    feats = np.nan_to_num(feats, nan=0.0)
    return np.concatenate([dx_onehot(visit.diagnosis), feats, [months_to_final / TIME_SCALE]])


@dataclass
class TokenBatch:
    """Right-padded input visits for attention models."""

    x: np.ndarray           # (B, T, in_dim)
    months_to_final: np.ndarray  # (B, T)
    valid: np.ndarray       # (B, T) bool
    targets: np.ndarray     # (B,) int, -1 when unknown


def token_batch(sequences: Sequence, layout: InputLayout, dtype=np.float64) -> TokenBatch:
    """Encode each sequence's input visits (all but the last)."""
    lengths = [len(s.visits) - 1 for s in sequences]
    if any(n < 1 for n in lengths):
        raise ValueError("every sequence needs at least one input visit")
    B, T = len(sequences), max(lengths)
    x = np.zeros((B, T, layout.in_dim), dtype=dtype)
    mtf = np.zeros((B, T), dtype=dtype)
    valid = np.zeros((B, T), dtype=bool)
    targets = np.full(B, -1, dtype=np.int64)
    for b, seq in enumerate(sequences):
        final = seq.visits[-1].exam_month
        for t, v in enumerate(seq.visits[:-1]):
            gap = float(final - v.exam_month)
            x[b, t] = visit_vector(v, layout, gap)
            mtf[b, t] = gap
            valid[b, t] = True
        dx = seq.visits[-1].diagnosis
        if dx is not None:
            targets[b] = int(dx)
    return TokenBatch(x, mtf, valid, targets)


@dataclass
class RolloutBatch:
    """Month-by-month grid for recurrent rollout.

    Step ``m`` consumes the input for month ``m`` and predicts month ``m+1``.
    """

    obs: np.ndarray          # (B, L, in_dim) observed visit vectors
    observed: np.ndarray     # (B, L) bool: a visit is available as input at month m
    time: np.ndarray         # (B, L) time channel value at month m
    next_dx: np.ndarray      # (B, L) int DX at month m+1 (-1 if no visit)
    next_feat: np.ndarray    # (B, L, F) features at month m+1
    next_feat_mask: np.ndarray  # (B, L, F) which next_feat entries count in the loss
    has_next: np.ndarray     # (B, L) bool: a visit exists at month m+1
    target_step: np.ndarray  # (B,) index of the step whose output predicts the target visit
    targets: np.ndarray      # (B,) int target DX


def rollout_batch(
    sequences: Sequence,
    layout: InputLayout,
    horizon_months: Optional[int] = 72,
    include_target_input: bool = False,
    input_fill: Optional[Sequence[np.ndarray]] = None,
    dtype=np.float64,
) -> RolloutBatch:
    """Lay sequences out on a monthly grid starting at their first visit.

    The final visit is the prediction target and is never used as an input
    unless ``include_target_input`` is set (imputation uses it). Missing
    feature values are excluded from the loss mask; as inputs they take the
    matching row of ``input_fill`` (per sequence, per visit) or zero.
    """
    B = len(sequences)
    spans = []
    for s in sequences:
        span = s.visits[-1].exam_month - s.visits[0].exam_month
        if span <= 0:
            raise ValueError(f"sequence {getattr(s, 'subject_id', '?')} has no positive time span")
        if horizon_months is not None and span > horizon_months:
            raise HorizonError(
                f"target month {span} lies beyond the {horizon_months}-month horizon"
            )
        spans.append(span)
    L = max(spans)
    F = layout.n_features
    obs = np.zeros((B, L, layout.in_dim), dtype=dtype)
    observed = np.zeros((B, L), dtype=bool)
    time = np.zeros((B, L), dtype=dtype)
    next_dx = np.full((B, L), -1, dtype=np.int64)
    next_feat = np.zeros((B, L, F), dtype=dtype)
    next_mask = np.zeros((B, L, F), dtype=bool)
    has_next = np.zeros((B, L), dtype=bool)
    target_step = np.zeros(B, dtype=np.int64)
    targets = np.full(B, -1, dtype=np.int64)
    for b, seq in enumerate(sequences):
        base = seq.visits[0].exam_month
        final = seq.visits[-1].exam_month
        time[b] = (final - base - np.arange(L)) / TIME_SCALE
        n_in = len(seq.visits) if include_target_input else len(seq.visits) - 1
        for i, v in enumerate(seq.visits):
            m = v.exam_month - base
            raw = v.feature_array(layout.feature_keys)
            present = ~np.isnan(raw)
            if i < n_in and m < L:
                vec = raw.copy()
                if input_fill is not None:
                    vec[~present] = input_fill[b][i][~present]
                vec = np.nan_to_num(vec, nan=0.0)
                obs[b, m] = np.concatenate([dx_onehot(v.diagnosis), vec, [(final - v.exam_month) / TIME_SCALE]])
                observed[b, m] = True
            if m >= 1:
                has_next[b, m - 1] = True
                next_dx[b, m - 1] = -1 if v.diagnosis is None else int(v.diagnosis)
                next_feat[b, m - 1] = np.nan_to_num(raw, nan=0.0)
                next_mask[b, m - 1] = present
        target_step[b] = final - base - 1
        if seq.visits[-1].diagnosis is not None:
            targets[b] = int(seq.visits[-1].diagnosis)
    return RolloutBatch(obs, observed, time, next_dx, next_feat, next_mask, has_next, target_step, targets)


class HorizonError(ValueError):
    """Target visit lies beyond the rollout horizon."""


def clip_to_horizon(seq, horizon_months: int):
    """Drop the earliest input visits until the span fits the horizon."""
    visits = list(seq.visits)
    while len(visits) > 2 and visits[-1].exam_month - visits[0].exam_month > horizon_months:
        visits.pop(0)
    if visits[-1].exam_month - visits[0].exam_month > horizon_months:
        raise HorizonError(
            f"gap between last two visits exceeds the {horizon_months}-month horizon"
        )
    if len(visits) == len(seq.visits):
        return seq
    return seq.with_visits(tuple(visits))
