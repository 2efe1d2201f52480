"""LSTM, GRU and minimalRNN predictors with month-by-month rollout.

Starting from the first visit the model steps one month at a time. At a
month with an observed visit that visit is the input; otherwise the
previous step's output (predicted DX distribution and features) is fed
back. The DX output of the step preceding the target month is the
prediction for the target visit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .. import numcore as nc
from ..data_model import FEATURE_KEYS, N_CLASSES
from .encoding import HorizonError, InputLayout, RolloutBatch, clip_to_horizon, rollout_batch

CELL_KINDS = ("LSTM", "GRU", "minRNN")
_GATES = {"LSTM": 4, "GRU": 3}


@dataclass(frozen=True)
class RnnConfig:
    cell: str = "minRNN"
    hidden_dim: int = 64
    feature_keys: tuple[str, ...] = FEATURE_KEYS
    horizon_months: int = 72
    feature_loss_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "feature_keys", tuple(self.feature_keys))
        if self.cell not in CELL_KINDS:
            raise ValueError(f"unknown cell {self.cell!r}; expected one of {CELL_KINDS}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not 1 <= self.horizon_months:
            raise ValueError("horizon_months must be positive")

    @property
    def layout(self) -> InputLayout:
        return InputLayout(self.feature_keys)


def init_cell_params(store: nc.ParamStore, cell: str, in_dim: int, hidden: int,
                     rng: np.random.Generator, prefix: str = "cell") -> None:
    bound = 1.0 / math.sqrt(hidden)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)

    if cell == "minRNN":
        store.add(f"{prefix}.W_z", u(in_dim, hidden))
        store.add(f"{prefix}.U_h", u(hidden, hidden))
        store.add(f"{prefix}.U_z", u(hidden, hidden))
        store.add(f"{prefix}.b_u", np.zeros(hidden))
        return
    k = _GATES[cell]
    store.add(f"{prefix}.W", u(in_dim, k * hidden))
    store.add(f"{prefix}.U", u(hidden, k * hidden))
    b = np.zeros(k * hidden)
    if cell == "LSTM":
        b[hidden:2 * hidden] = 1.0  # forget-gate bias
    store.add(f"{prefix}.b", b)
    if cell == "GRU":
        store.add(f"{prefix}.b_U", np.zeros(k * hidden))


def initial_state(cell: str, batch: int, hidden: int, dtype=np.float64):
    h = nc.Tensor(np.zeros((batch, hidden), dtype=dtype))
    if cell == "LSTM":
        return (h, nc.Tensor(np.zeros((batch, hidden), dtype=dtype)))
    return h


def state_hidden(cell: str, state) -> nc.Tensor:
    return state[0] if cell == "LSTM" else state


def cell_step(cell: str, x: nc.Tensor, state, params: nc.ParamStore, prefix: str = "cell"):
    """Advance one step; returns ``(h_t, state_t)``."""
    if cell == "LSTM":
        h, c = state
        H = h.shape[-1]
        z = x @ params[f"{prefix}.W"] + h @ params[f"{prefix}.U"] + params[f"{prefix}.b"]
        i = nc.sigmoid(z[:, 0:H])
        f = nc.sigmoid(z[:, H:2 * H])
        g = nc.tanh(z[:, 2 * H:3 * H])
        o = nc.sigmoid(z[:, 3 * H:4 * H])
        c_new = f * c + i * g
        h_new = o * nc.tanh(c_new)
        return h_new, (h_new, c_new)
    if cell == "GRU":
        h = state
        H = h.shape[-1]
        xw = x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]
        hu = h @ params[f"{prefix}.U"] + params[f"{prefix}.b_U"]
        r = nc.sigmoid(xw[:, 0:H] + hu[:, 0:H])
        upd = nc.sigmoid(xw[:, H:2 * H] + hu[:, H:2 * H])
        n = nc.tanh(xw[:, 2 * H:3 * H] + r * hu[:, 2 * H:3 * H])
        h_new = (1.0 - upd) * n + upd * h
        return h_new, h_new
    if cell == "minRNN":
        h = state
        z = nc.tanh(x @ params[f"{prefix}.W_z"])
        u = nc.sigmoid(h @ params[f"{prefix}.U_h"] + z @ params[f"{prefix}.U_z"] + params[f"{prefix}.b_u"])
        h_new = u * h + (1.0 - u) * z
        return h_new, h_new
    raise ValueError(f"unknown cell {cell!r}")


class RNNModel:
    kind = "rnn"

    def __init__(self, config: RnnConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.layout = config.layout
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = nc.ParamStore(dtype)
        H = config.hidden_dim
        init_cell_params(self.params, config.cell, self.layout.in_dim, H, rng)
        bound = 1.0 / math.sqrt(H)
        self.params.add("head.W", rng.uniform(-bound, bound, size=(H, self.layout.out_dim)))
        self.params.add("head.b", np.zeros(self.layout.out_dim))

    # -- config / persistence ------------------------------------------------
    def to_config(self) -> dict:
        cfg = asdict(self.config)
        cfg["feature_keys"] = list(self.config.feature_keys)
        return {"kind": "rnn", "rnn": cfg}

    # -- forward ---------------------------------------------------------------
    def rollout(self, batch: RolloutBatch, feedback: str = "prediction") -> nc.Tensor:
        """Run the monthly rollout; returns outputs of shape (B, L, 3 + F).

        ``feedback="prediction"`` feeds the previous output back at months
        without a visit; ``"last_observation"`` carries the most recent
        observed visit forward instead (teacher-forcing style).
        """
        cell = self.config.cell
        B, L = batch.observed.shape
        state = initial_state(cell, B, self.config.hidden_dim, self.dtype)
        W, b = self.params["head.W"], self.params["head.b"]
        outputs = []
        prev = None
        last_obs = batch.obs[:, 0].copy()
        for m in range(L):
            mask = batch.observed[:, m]
            obs_m = nc.Tensor(batch.obs[:, m].astype(self.dtype, copy=False))
            if m == 0 or mask.all():
                x = obs_m
            else:
                time_m = batch.time[:, m:m + 1].astype(self.dtype, copy=False)
                if feedback == "prediction":
                    fb = nc.concat([nc.softmax(prev[:, 0:N_CLASSES]), prev[:, N_CLASSES:], nc.Tensor(time_m)], axis=-1)
                elif feedback == "last_observation":
                    carried = last_obs.copy()
                    carried[:, -1] = time_m[:, 0]
                    fb = nc.Tensor(carried.astype(self.dtype, copy=False))
                else:
                    raise ValueError(f"unknown feedback mode {feedback!r}")
                x = fb if not mask.any() else nc.where(mask[:, None], obs_m, fb)
            last_obs[mask] = batch.obs[mask, m]
            h, state = cell_step(cell, x, state, self.params)
            prev = h @ W + b
            outputs.append(prev)
        return nc.stack(outputs, axis=1)

    def loss(self, sequences: Sequence, train: bool = True, step: int = 0,
             class_weights: Optional[np.ndarray] = None) -> nc.Tensor:
        batch = self.make_batch(sequences)
        return self.batch_loss(batch, class_weights)

    def make_batch(self, sequences: Sequence, **kw) -> RolloutBatch:
        seqs = [clip_to_horizon(s, self.config.horizon_months) for s in sequences]
        return rollout_batch(seqs, self.layout, self.config.horizon_months, dtype=self.dtype, **kw)

    def batch_loss(self, batch: RolloutBatch, class_weights: Optional[np.ndarray] = None) -> nc.Tensor:
        out = self.rollout(batch)
        logits = out[:, :, 0:N_CLASSES]
        feats = out[:, :, N_CLASSES:]
        valid = batch.next_dx >= 0
        w = valid.astype(float)
        if class_weights is not None:
            w = w * np.asarray(class_weights)[np.clip(batch.next_dx, 0, None)]
        ce = nc.cross_entropy(logits, np.where(valid, batch.next_dx, 0), w)
        mse = nc.masked_mse(feats, batch.next_feat, batch.next_feat_mask & batch.has_next[..., None])
        return ce + nc.scale(mse, self.config.feature_loss_weight)

    def predict_logits(self, sequences: Sequence, batch_size: int = 256) -> np.ndarray:
        chunks = []
        with nc.no_grad():
            for lo in range(0, len(sequences), batch_size):
                batch = self.make_batch(sequences[lo:lo + batch_size])
                out = self.rollout(batch).data
                chunks.append(out[np.arange(len(batch.target_step)), batch.target_step, 0:N_CLASSES])
        if not chunks:
            return np.zeros((0, N_CLASSES))
        return np.concatenate(chunks).astype(np.float64)


def rnn_rollout_predict(model: RNNModel, sequence, horizon_months: Optional[int] = None,
                        feedback: str = "prediction") -> dict:
    """Monthly DX predictions from the first visit up to the target month.

    Returns ``{"months": month offsets predicted, "probs": (L, 3),
    "target": (3,), "n_steps": L, "feedback_inputs": number of steps whose
    input was the model's own previous output}``.
    """
    horizon = model.config.horizon_months if horizon_months is None else horizon_months
    span = sequence.visits[-1].exam_month - sequence.visits[0].exam_month
    if span > horizon:
        raise HorizonError(f"target month {span} lies beyond the {horizon}-month horizon")
    batch = rollout_batch([sequence], model.layout, horizon, dtype=model.dtype)
    with nc.no_grad():
        out = model.rollout(batch, feedback=feedback).data[0]
    logits = out[:, 0:N_CLASSES]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return {
        "months": np.arange(1, out.shape[0] + 1),
        "probs": probs,
        "target": probs[batch.target_step[0]],
        "n_steps": int(out.shape[0]),
        "feedback_inputs": int((~batch.observed[0, 1:]).sum()),
    }
