"""Shared helpers: central finite differences and small synthetic fixtures."""
import numpy as np
import pytest

from adprog import numcore as nc


def relative_error(analytic, numeric, floor=1e-7):
    """Max abs difference scaled by the larger of the two gradients' max magnitudes.

    Gradients that are identically zero in exact arithmetic (e.g. an attention
    key bias, which shifts every score of a query equally) come out as
    rounding noise; ``floor`` keeps the ratio meaningful for them.
    """
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f, arr, eps=1e-5, coords=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return out.reshape(arr.shape)


def check_params(loss_fn, tensors, eps=1e-5, max_coords=None, seed=0):
    """Worst relative error over ``tensors`` (name -> Tensor) for ``loss_fn() -> Tensor``."""
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)

        def f():
            with nc.no_grad():
                return float(loss_fn().data)

        numeric = numeric_grad(f, t.data, eps, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_sequence(months, dxs, seed=0, missing=0.0, subject="T0"):
    """A VisitSequence with random normalised-scale features."""
    from adprog.data_model import FEATURE_KEYS, Diagnosis, make_visit
    from adprog.sequences import make_sequence

    r = np.random.default_rng(seed)
    visits = []
    for m, d in zip(months, dxs):
        vals = {k: (None if r.random() < missing else float(r.normal())) for k in FEATURE_KEYS}
        visits.append(make_visit(subject, m, Diagnosis(d), vals))
    return make_sequence(subject, visits)
