"""Parameter storage and the Adam optimiser."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping, Optional

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered, uniquely named collection of trainable tensors.

    Also carries Adam's moment estimates and step counter so a store can be
    handed to :func:`adam_step` repeatedly.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, Optional[np.ndarray]]:
        return {k: t.grad for k, t in self._params.items()}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}


def count_params(store: ParamStore) -> int:
    return int(sum(t.size for _, t in store.items()))


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = global_grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= factor
    return norm


def adam_step(
    store: ParamStore,
    grads: Optional[Mapping[str, Optional[np.ndarray]]] = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to the gradients accumulated on the store's tensors;
    parameters with no gradient are treated as having a zero gradient.
    """
    if grads is None:
        grads = store.grads()
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match {p.shape}")
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        if lr == 0.0:
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(store.dtype, copy=False)
