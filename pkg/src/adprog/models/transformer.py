"""Encoder-decoder Transformer that classifies the next visit's diagnosis.

Every input visit is a token: a linear projection of its visit vector plus
a sinusoidal encoding of the months remaining until the target visit. The
encoder is a stack of pre-norm self-attention blocks. The decoder starts
from one learned query token; each decoder layer runs self-attention over
that token, cross-attention to the encoder outputs, and a feed-forward
block. A linear head maps the final query state to three logits.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .. import numcore as nc
from ..data_model import FEATURE_KEYS, N_CLASSES
from .encoding import InputLayout, TokenBatch, token_batch


@dataclass(frozen=True)
class TransformerConfig:
    n_encoder_layers: int = 4
    n_decoder_layers: int = 8
    n_heads: int = 4
    d_model: int = 256
    d_ffn: int = 512
    dropout: float = 0.1
    max_seq_len: int = 8
    feature_keys: tuple[str, ...] = FEATURE_KEYS

    def __post_init__(self):
        object.__setattr__(self, "feature_keys", tuple(self.feature_keys))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_encoder_layers, self.n_decoder_layers, self.n_heads, self.d_ffn, self.max_seq_len) < 1:
            raise ValueError("layer counts, heads, d_ffn and max_seq_len must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def layout(self) -> InputLayout:
        return InputLayout(self.feature_keys)


def time_encoding(months: np.ndarray, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of a continuous month value, shape (..., d_model)."""
    half = d_model // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) * 2.0 / d_model)
    angles = np.asarray(months, dtype=np.float64)[..., None] * freqs
    out = np.zeros(angles.shape[:-1] + (d_model,))
    out[..., 0:2 * half:2] = np.sin(angles)
    out[..., 1:2 * half:2] = np.cos(angles)
    return out


class TransformerModel:
    kind = "transformer"

    def __init__(self, config: TransformerConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.layout = config.layout
        self.dtype = np.dtype(dtype)
        self.params = nc.ParamStore(dtype)
        self.last_attention: list[np.ndarray] = []
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ffn

        def dense(name, n_in, n_out):
            bound = 1.0 / math.sqrt(n_in)
            self.params.add(f"{name}.W", rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.params.add(f"{name}.b", np.zeros(n_out))

        def norm(name):
            self.params.add(f"{name}.g", np.ones(d))
            self.params.add(f"{name}.b", np.zeros(d))

        def attention(name):
            for proj in ("q", "k", "v", "o"):
                dense(f"{name}.{proj}", d, d)

        def ffn(name):
            dense(f"{name}.fc1", d, f)
            dense(f"{name}.fc2", f, d)

        dense("embed", self.layout.in_dim, d)
        for i in range(config.n_encoder_layers):
            norm(f"enc{i}.ln1")
            attention(f"enc{i}.attn")
            norm(f"enc{i}.ln2")
            ffn(f"enc{i}.ffn")
        norm("enc.ln")
        self.params.add("query", rng.normal(0.0, 0.02, size=(1, d)))
        for i in range(config.n_decoder_layers):
            norm(f"dec{i}.ln1")
            attention(f"dec{i}.self")
            norm(f"dec{i}.ln2")
            attention(f"dec{i}.cross")
            norm(f"dec{i}.ln3")
            ffn(f"dec{i}.ffn")
        norm("dec.ln")
        dense("head", d, N_CLASSES)

    def to_config(self) -> dict:
        cfg = asdict(self.config)
        cfg["feature_keys"] = list(self.config.feature_keys)
        return {"kind": "transformer", "transformer": cfg}

    # -- building blocks ----------------------------------------------------
    def _dense(self, x: nc.Tensor, name: str) -> nc.Tensor:
        return x @ self.params[f"{name}.W"] + self.params[f"{name}.b"]

    def _norm(self, x: nc.Tensor, name: str) -> nc.Tensor:
        return nc.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: nc.Tensor, train: bool, key: tuple[int, int, int]) -> nc.Tensor:
        return nc.dropout(x, self.config.dropout, train, key)

    def _attend(self, xq: nc.Tensor, xkv: nc.Tensor, name: str, key_valid: Optional[np.ndarray],
                train: bool, key) -> nc.Tensor:
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H = self.config.n_heads
        dh = d // H

        def heads(t, T):
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = heads(self._dense(xq, f"{name}.q"), Tq)
        k = heads(self._dense(xkv, f"{name}.k"), Tk)
        v = heads(self._dense(xkv, f"{name}.v"), Tk)
        scores = nc.scale(q @ nc.swap_last(k), 1.0 / math.sqrt(dh))
        if key_valid is not None and not key_valid.all():
            scores = nc.masked_fill(scores, ~key_valid[:, None, None, :], -np.inf)
        weights = nc.softmax(scores, axis=-1)
        if self._record:
            self.last_attention.append(weights.data)
        weights = self._drop(weights, train, key)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._dense(ctx, f"{name}.o")

    def _ffn(self, x: nc.Tensor, name: str, train: bool, key) -> nc.Tensor:
        hidden = nc.relu(self._dense(x, f"{name}.fc1"))
        hidden = self._drop(hidden, train, key)
        return self._dense(hidden, f"{name}.fc2")

    # -- forward ----------------------------------------------------------------
    def forward(self, batch: TokenBatch, train: bool = False, step: int = 0, seed: int = 0,
                record_attention: bool = False) -> nc.Tensor:
        """Logits for the visit after each sequence, shape (B, 3)."""
        B, T, _ = batch.x.shape
        if T < 1:
            raise ValueError("transformer input needs at least one visit")
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence of {T} input visits exceeds max_seq_len={self.config.max_seq_len}")
        self._record = record_attention
        self.last_attention = []
        d = self.config.d_model
        valid = batch.valid
        site = iter(range(10_000))

        def k():
            return (seed, next(site), step)

        tenc = time_encoding(batch.months_to_final, d).astype(self.dtype)
        h = self._dense(nc.Tensor(batch.x.astype(self.dtype, copy=False)), "embed") + nc.Tensor(tenc)
        h = self._drop(h, train, k())
        for i in range(self.config.n_encoder_layers):
            a = self._norm(h, f"enc{i}.ln1")
            h = h + self._drop(self._attend(a, a, f"enc{i}.attn", valid, train, k()), train, k())
            a = self._norm(h, f"enc{i}.ln2")
            h = h + self._drop(self._ffn(a, f"enc{i}.ffn", train, k()), train, k())
        memory = self._norm(h, "enc.ln")

        q = nc.Tensor(np.zeros((B, 1, d), dtype=self.dtype)) + self.params["query"]
        for i in range(self.config.n_decoder_layers):
            a = self._norm(q, f"dec{i}.ln1")
            q = q + self._drop(self._attend(a, a, f"dec{i}.self", None, train, k()), train, k())
            a = self._norm(q, f"dec{i}.ln2")
            q = q + self._drop(self._attend(a, memory, f"dec{i}.cross", valid, train, k()), train, k())
            a = self._norm(q, f"dec{i}.ln3")
            q = q + self._drop(self._ffn(a, f"dec{i}.ffn", train, k()), train, k())
        q = self._norm(q, "dec.ln").reshape(B, d)
        return self._dense(q, "head")

    _record = False

    def make_batch(self, sequences: Sequence) -> TokenBatch:
        return token_batch(sequences, self.layout, dtype=self.dtype)

    def batch_loss(self, batch: TokenBatch, class_weights: Optional[np.ndarray] = None,
                   train: bool = True, step: int = 0, seed: int = 0) -> nc.Tensor:
        logits = self.forward(batch, train=train, step=step, seed=seed)
        valid = batch.targets >= 0
        w = valid.astype(float)
        if class_weights is not None:
            w = w * np.asarray(class_weights)[np.clip(batch.targets, 0, None)]
        return nc.cross_entropy(logits, np.where(valid, batch.targets, 0), w)

    def predict_logits(self, sequences: Sequence, batch_size: int = 256) -> np.ndarray:
        chunks = []
        with nc.no_grad():
            for lo in range(0, len(sequences), batch_size):
                batch = self.make_batch(sequences[lo:lo + batch_size])
                chunks.append(self.forward(batch, train=False).data)
        if not chunks:
            return np.zeros((0, N_CLASSES))
        return np.concatenate(chunks).astype(np.float64)


def transformer_forward(model: TransformerModel, sequences: Sequence) -> np.ndarray:
    """Eval-mode logits for the visit following each input sequence."""
    return model.predict_logits(list(sequences))
