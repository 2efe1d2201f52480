"""Cohort cleaning, temporal feature, normalisation and model-filling imputation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .data_model import FEATURE_KEYS, Diagnosis, SubjectHistory, VisitRecord, history_matrix
from .models.encoding import rollout_batch
from .models.rnn import RNNModel, RnnConfig, cell_step, initial_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CleanReport:
    dropped_single_visit_subjects: int = 0
    dropped_reverter_subjects: int = 0
    truncated_multi_converters: int = 0
    dropped_missing_dx_visits: int = 0

    def as_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.__dict__.items())


def _observed_dx(h: SubjectHistory) -> list[Diagnosis]:
    return [d for d in h.diagnoses if d is not None]


def _is_reverter(h: SubjectHistory) -> bool:
    dx = _observed_dx(h)
    return any(b < a for a, b in zip(dx, dx[1:]))


def clean(histories: Iterable[SubjectHistory]) -> tuple[list[SubjectHistory], CleanReport]:
    """Apply the four cleaning steps in order, then drop subjects left with one visit.

    1. drop subjects with a single visit
    2. drop reverters (observed DX ever decreases)
    3. truncate multi-converters after their first conversion visit
    4. drop visits with missing DX
    """
    singles = reverters = truncated = missing = 0
    step1 = []
    for h in histories:
        if len(h.visits) <= 1:
            singles += 1
        else:
            step1.append(h)

    step2 = []
    for h in step1:
        if _is_reverter(h):
            reverters += 1
        else:
            step2.append(h)

    step3 = []
    for h in step2:
        observed = [(i, v.diagnosis) for i, v in enumerate(h.visits) if v.diagnosis is not None]
        rises = [observed[j][0] for j in range(1, len(observed)) if observed[j][1] > observed[j - 1][1]]
        if len(rises) > 1:
            truncated += 1
            h = SubjectHistory(h.subject_id, h.visits[: rises[0] + 1])
        step3.append(h)

    step4 = []
    for h in step3:
        kept = tuple(v for v in h.visits if v.diagnosis is not None)
        missing += len(h.visits) - len(kept)
        step4.append(SubjectHistory(h.subject_id, kept))

    out = []
    for h in step4:
        if len(h.visits) <= 1:
            singles += 1
        else:
            out.append(h)
    return out, CleanReport(singles, reverters, truncated, missing)


def add_months_to_final(sequence):
    """Set ``months_to_final`` on every visit, relative to the sequence's last visit."""
    if len(sequence.visits) < 2:
        raise ValueError("months-to-final needs at least two visits")
    final = sequence.visits[-1].exam_month
    visits = tuple(replace(v, months_to_final=float(final - v.exam_month)) for v in sequence.visits)
    if hasattr(sequence, "with_visits"):
        return replace(sequence, visits=visits)
    return SubjectHistory(sequence.subject_id, visits)


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormStats:
    mean: Mapping[str, float]
    std: Mapping[str, float]

    def arrays(self, keys: Sequence[str] = FEATURE_KEYS) -> tuple[np.ndarray, np.ndarray]:
        return np.array([self.mean[k] for k in keys]), np.array([self.std[k] for k in keys])

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls({k: float(v) for k, v in d["mean"].items()}, {k: float(v) for k, v in d["std"].items()})


def _visits_of(items) -> list[VisitRecord]:
    return [v for h in items for v in h.visits]


def fit_norm(train: Iterable) -> NormStats:
    """Per-feature mean and population std over present values (std 1 if constant or empty)."""
    mat = history_matrix(_visits_of(train))
    means, stds = {}, {}
    for j, k in enumerate(FEATURE_KEYS):
        col = mat[:, j] if mat.size else np.array([])
        col = col[~np.isnan(col)]
        mu = float(col.mean()) if col.size else 0.0
        sd = float(col.std()) if col.size else 0.0
        means[k] = mu
        stds[k] = sd if sd > 0 else 1.0
    return NormStats(means, stds)


def _map_features(items, fn):
    out = []
    for h in items:
        visits = tuple(
            v.with_features({k: (None if x is None else fn(k, x)) for k, x in v.features.items()})
            for v in h.visits
        )
        out.append(replace(h, visits=visits))
    return out


def apply_norm(items: Iterable, stats: NormStats) -> list:
    return _map_features(items, lambda k, x: (x - stats.mean[k]) / stats.std[k])


def unapply_norm(items: Iterable, stats: NormStats) -> list:
    return _map_features(items, lambda k, x: x * stats.std[k] + stats.mean[k])


# ---------------------------------------------------------------------------
# model filling


def bootstrap_fill(matrix: np.ndarray) -> np.ndarray:
    """Forward-fill within a subject, then fill leading gaps with 0 (the training mean)."""
    out = matrix.copy()
    for t in range(1, out.shape[0]):
        gap = np.isnan(out[t])
        out[t, gap] = out[t - 1, gap]
    return np.nan_to_num(out, nan=0.0)


class UntrainedFillerError(RuntimeError):
    pass


@dataclass
class FillerConfig:
    hidden_dim: int = 32
    epochs: int = 8
    lr: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    clip: float = 5.0


@dataclass
class Filler:
    """A minimalRNN trained to predict next-visit features for imputation."""

    model: RNNModel
    trained: bool = False
    history: list = field(default_factory=list)


def _spans_ok(items) -> list:
    return [h for h in items if len(h.visits) >= 2 and h.visits[-1].exam_month > h.visits[0].exam_month]


def train_filler(normed: Sequence, cfg: FillerConfig = FillerConfig(), dtype=np.float64) -> Filler:
    """Train the filler on normalised histories.

    Inputs with missing cells use the bootstrap fill; the feature loss only
    counts originally observed cells.
    """
    model = RNNModel(RnnConfig(cell="minRNN", hidden_dim=cfg.hidden_dim, horizon_months=10_000),
                     seed=cfg.seed, dtype=dtype)
    items = _spans_ok(normed)
    filler = Filler(model)
    if not items:
        filler.trained = True
        return filler
    fills = [bootstrap_fill(history_matrix(h.visits)) for h in items]
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = rollout_batch([items[i] for i in idx], model.layout, None,
                                  include_target_input=True, input_fill=[fills[i] for i in idx], dtype=dtype)
            model.params.zero_grad()
            loss = model.batch_loss(batch)
            loss.backward()
            nc.clip_grad_norm(model.params, cfg.clip)
            nc.adam_step(model.params, lr=cfg.lr)
            total += float(loss.data) * len(idx)
        filler.history.append(total / len(items))
        log.debug("filler epoch %d loss %.4f", epoch, filler.history[-1])
    filler.trained = True
    return filler


def _fill_normalised(filler: Filler, normed: Sequence, batch_size: int = 128) -> list[np.ndarray]:
    """Filled (n_visits, F) matrices in normalised space.

    One batched rollout per chunk: at each visit, gaps take the prediction
    made at the previous month, and the filled visit is what the filler
    consumes next, so later predictions condition on earlier fills.
    """
    model = filler.model
    out: list[np.ndarray] = []
    for lo in range(0, len(normed), batch_size):
        out.extend(_fill_chunk(model, normed[lo:lo + batch_size]))
    return out


def _fill_chunk(model: RNNModel, items: Sequence) -> list[np.ndarray]:
    F = len(FEATURE_KEYS)
    mats = [history_matrix(h.visits) for h in items]
    filled = [m.copy() for m in mats]
    for f in filled:
        f[0] = np.nan_to_num(f[0], nan=0.0)
    bases = [h.visits[0].exam_month for h in items]
    finals = [h.visits[-1].exam_month for h in items]
    spans = [fin - b for fin, b in zip(finals, bases)]
    L = max(spans) if spans else 0
    B = len(items)
    # month offset -> visit index, per subject
    at = [{v.exam_month - b: i for i, v in enumerate(h.visits)} for h, b in zip(items, bases)]
    dx = np.zeros((B, 3))
    for b, h in enumerate(items):
        if h.visits[0].diagnosis is not None:
            dx[b, int(h.visits[0].diagnosis)] = 1.0
    x_feat = np.array([f[0] for f in filled]) if B else np.zeros((0, F))
    W, bias = model.params["head.W"].data, model.params["head.b"].data
    prev = np.zeros((B, 3 + F))
    with nc.no_grad():
        state = initial_state(model.config.cell, B, model.config.hidden_dim, model.dtype)
        for m in range(L + 1):
            if m > 0:
                logits, pred = prev[:, :3], prev[:, 3:]
                e = np.exp(logits - logits.max(axis=1, keepdims=True))
                dx = e / e.sum(axis=1, keepdims=True)
                x_feat = pred.copy()
                for b in range(B):
                    i = at[b].get(m)
                    if i is None:
                        continue
                    row = mats[b][i]
                    gap = np.isnan(row)
                    filled[b][i] = np.where(gap, pred[b], row)
                    x_feat[b] = filled[b][i]
                    d = items[b].visits[i].diagnosis
                    if d is not None:
                        dx[b] = 0.0
                        dx[b, int(d)] = 1.0
            if m == L:
                break
            time = np.array([(fin - base - m) / 12.0 for fin, base in zip(finals, bases)])[:, None]
            x = nc.Tensor(np.concatenate([dx, x_feat, time], axis=1).astype(model.dtype))
            h, state = cell_step(model.config.cell, x, state, model.params)
            prev = (h.data @ W + bias).astype(np.float64)
    return filled


def model_fill(histories: Sequence, filler: Filler, fallback: NormStats) -> list:
    """Replace every missing feature value; observed values are never touched.

    First-visit gaps take the training mean from ``fallback``; later gaps take
    the filler's one-step-ahead prediction given the (already filled) earlier
    visits. Works on raw-scale histories or sequences.
    """
    if filler is None or not filler.trained:
        raise UntrainedFillerError("model_fill needs a trained filler")
    normed = apply_norm(histories, fallback)
    filled = _fill_normalised(filler, normed)
    mean, std = fallback.arrays()
    out = []
    for h, mat in zip(histories, filled):
        visits = []
        for v, row in zip(h.visits, mat):
            raw = row * std + mean
            feats = {}
            for j, k in enumerate(FEATURE_KEYS):
                x = v.features[k]
                feats[k] = float(raw[j]) if x is None else x
            visits.append(v.with_features(feats))
        out.append(replace(h, visits=tuple(visits)))
    return out


def mean_fill(histories: Sequence, stats: NormStats) -> list:
    """Baseline imputation: every gap takes the training mean."""
    return _map_missing(histories, lambda k: stats.mean[k])


def _map_missing(histories, value_for):
    out = []
    for h in histories:
        visits = tuple(
            v.with_features({k: (value_for(k) if x is None else x) for k, x in v.features.items()})
            for v in h.visits
        )
        out.append(replace(h, visits=visits))
    return out


def missing_count(histories: Iterable) -> int:
    return sum(x is None for h in histories for v in h.visits for x in v.features.values())
