"""Next-visit diagnosis predictors."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from ..numcore import checkpoint_bytes, load_checkpoint, save_checkpoint
from .encoding import HorizonError, InputLayout, rollout_batch, token_batch
from .rnn import CELL_KINDS, RNNModel, RnnConfig, cell_step, rnn_rollout_predict
from .transformer import TransformerConfig, TransformerModel, time_encoding, transformer_forward

MODEL_KINDS = ("Transformer", "LSTM", "GRU", "minRNN")

Model = Union[RNNModel, TransformerModel]


def build_model(kind: str, options: Mapping | None = None, seed: int = 0, dtype=np.float64) -> Model:
    """Instantiate a fresh model. ``kind`` is one of :data:`MODEL_KINDS`."""
    options = dict(options or {})
    if kind == "Transformer":
        return TransformerModel(TransformerConfig(**options), seed=seed, dtype=dtype)
    if kind in CELL_KINDS:
        options.pop("cell", None)
        return RNNModel(RnnConfig(cell=kind, **options), seed=seed, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_kind(model: Model) -> str:
    return "Transformer" if isinstance(model, TransformerModel) else model.config.cell


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: Model, sequences: Sequence) -> np.ndarray:
    """Class probabilities (N, 3) for the visit following each sequence."""
    return softmax_rows(model.predict_logits(list(sequences)))


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax; ties resolve to the less severe class (CN < MCI < AD)."""
    return np.argmax(np.asarray(probs), axis=-1)


def model_config(model: Model) -> dict:
    return {"model_kind": model_kind(model), **model.to_config()}


def model_to_bytes(model: Model, extra: Mapping | None = None) -> bytes:
    cfg = model_config(model)
    if extra:
        cfg["meta"] = dict(extra)
    return checkpoint_bytes(model.params.state_dict(), cfg)


def save_model(model: Model, path: Union[str, Path], extra: Mapping | None = None) -> None:
    Path(path).write_bytes(model_to_bytes(model, extra))


def model_from_state(config: Mapping, tensors: Mapping[str, np.ndarray], dtype=np.float32) -> Model:
    kind = config["model_kind"]
    section = config["transformer"] if kind == "Transformer" else config["rnn"]
    model = build_model(kind, section, seed=0, dtype=dtype)
    model.params.load_state_dict(tensors)
    return model


def load_model(path: Union[str, Path], dtype=np.float32) -> tuple[Model, dict]:
    config, tensors = load_checkpoint(path)
    return model_from_state(config, tensors, dtype), config


__all__ = [
    "MODEL_KINDS", "CELL_KINDS", "HorizonError", "InputLayout", "RNNModel", "RnnConfig",
    "TransformerConfig", "TransformerModel", "build_model", "cell_step", "load_model",
    "model_from_state", "model_kind", "model_to_bytes", "predict_labels", "predict_proba",
    "rnn_rollout_predict", "rollout_batch", "save_model", "softmax_rows", "time_encoding",
    "token_batch", "transformer_forward",
]
