"""Classification metrics: confusion matrix, sensitivity/specificity, BCA, F1, mAUC.

Metrics with a zero denominator evaluate to 0. Callers that need to know
about such degenerate classes use :func:`degenerate_classes`. Count-based
metrics are accumulated as exact fractions and rounded once at the end.
"""
from __future__ import annotations

from fractions import Fraction
from itertools import combinations
from typing import Optional

import numpy as np

from .data_model import N_CLASSES


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _counts(cm: np.ndarray, cls: int) -> tuple[int, int, int, int]:
    cm = np.asarray(cm)
    tp = int(cm[cls, cls])
    fn = int(cm[cls].sum()) - tp
    fp = int(cm[:, cls].sum()) - tp
    tn = int(cm.sum()) - tp - fn - fp
    return tp, fn, tn, fp


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def _sens(cm, cls) -> Fraction:
    tp, fn, _, _ = _counts(cm, cls)
    return _ratio(tp, tp + fn)


def _spec(cm, cls) -> Fraction:
    _, _, tn, fp = _counts(cm, cls)
    return _ratio(tn, tn + fp)


def sensitivity(cm: np.ndarray, cls: int) -> float:
    return float(_sens(cm, cls))


def specificity(cm: np.ndarray, cls: int) -> float:
    return float(_spec(cm, cls))


def bca(cm: np.ndarray) -> float:
    """Mean over classes of (sensitivity + specificity) / 2."""
    c = np.asarray(cm).shape[0]
    return float(sum(((_sens(cm, i) + _spec(cm, i)) / 2 for i in range(c)), Fraction(0)) / c)


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    return float(_ratio(int(np.trace(cm)), int(cm.sum())))


def _f1(cm: np.ndarray, cls: int) -> Fraction:
    tp = int(cm[cls, cls])
    precision = _ratio(tp, int(cm[:, cls].sum()))
    recall = _ratio(tp, int(cm[cls].sum()))
    if precision + recall == 0:
        return Fraction(0)
    return 2 * precision * recall / (precision + recall)


def f1_per_class(cm: np.ndarray) -> list[float]:
    cm = np.asarray(cm)
    return [float(_f1(cm, i)) for i in range(cm.shape[0])]


def macro_f1(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    c = cm.shape[0]
    return float(sum((_f1(cm, i) for i in range(c)), Fraction(0)) / c)


def degenerate_classes(cm: np.ndarray) -> list[str]:
    """Which sensitivity/specificity values fell back to 0 for lack of data."""
    flags = []
    for i in range(np.asarray(cm).shape[0]):
        tp, fn, tn, fp = _counts(cm, i)
        if tp + fn == 0:
            flags.append(f"sens[{i}]")
        if tn + fp == 0:
            flags.append(f"spec[{i}]")
    return flags


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pairwise_auc(scores_i, scores_j) -> float:
    """P(score of a class-i sample > score of a class-j sample), ties count 1/2."""
    n_i, n_j = len(scores_i), len(scores_j)
    ranks = midranks(np.concatenate([scores_i, scores_j]))
    rank_sum = ranks[:n_i].sum()
    return (rank_sum - n_i * (n_i + 1) / 2.0) / (n_i * n_j)


def mauc(probs, y_true, n_classes: int = N_CLASSES, return_skipped: bool = False):
    """Hand & Till multiclass AUC.

    For each unordered class pair (i, j), average the rank AUC of the class-i
    score restricted to classes i and j with the symmetric one. Pairs with an
    absent class are skipped and the average runs over the remaining pairs;
    NaN if none remain.
    """
    probs = np.asarray(probs, dtype=float)
    y_true = np.asarray(y_true, dtype=np.int64)
    total = 0.0
    used = 0
    skipped = []
    for i, j in combinations(range(n_classes), 2):
        in_i, in_j = y_true == i, y_true == j
        if not in_i.any() or not in_j.any():
            skipped.append((i, j))
            continue
        a_ij = pairwise_auc(probs[in_i, i], probs[in_j, i])
        a_ji = pairwise_auc(probs[in_j, j], probs[in_i, j])
        total += (a_ij + a_ji) / 2.0
        used += 1
    value = total / used if used else float("nan")
    return (value, skipped) if return_skipped else value


def metric_suite(cm: np.ndarray, probs: Optional[np.ndarray] = None, y_true=None) -> dict:
    """Every scalar metric for one evaluation slice."""
    c = np.asarray(cm).shape[0]
    sens = [sensitivity(cm, i) for i in range(c)]
    spec = [specificity(cm, i) for i in range(c)]
    out = {
        "accuracy": accuracy(cm),
        "bca": bca(cm),
        "sensitivity": float(sum((_sens(cm, i) for i in range(c)), Fraction(0)) / c),
        "specificity": float(sum((_spec(cm, i) for i in range(c)), Fraction(0)) / c),
        "macro_f1": macro_f1(cm),
    }
    for i in range(c):
        out[f"sensitivity_{i}"] = sens[i]
        out[f"specificity_{i}"] = spec[i]
    if probs is not None:
        out["mauc"] = mauc(probs, y_true, c)
    return out
