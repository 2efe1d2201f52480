"""Classification metrics against brute-force and exact-arithmetic oracles."""
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adprog.metrics import (accuracy, bca, confusion_matrix, degenerate_classes, f1_per_class, macro_f1,
                            mauc, midranks, sensitivity, specificity)


def brute_force_mauc(probs, y, c=3):
    """Hand-Till mAUC by counting every (class-i, class-j) sample pair directly."""
    total, used = 0.0, 0
    for i, j in combinations(range(c), 2):
        a = [p for p, t in zip(probs, y) if t == i]
        b = [p for p, t in zip(probs, y) if t == j]
        if not a or not b:
            continue

        def auc(pos, neg, k):
            wins = sum((x[k] > z[k]) + 0.5 * (x[k] == z[k]) for x in pos for z in neg)
            return wins / (len(pos) * len(neg))

        total += (auc(a, b, i) + auc(b, a, j)) / 2.0
        used += 1
    return total / used if used else float("nan")


def oracle_counts(cm):
    """Per-class (TP, FN, TN, FP) from the definition, without matrix slicing tricks."""
    n = len(cm)
    out = []
    for k in range(n):
        tp = fn = tn = fp = 0
        for t in range(n):
            for p in range(n):
                c = int(cm[t][p])
                if t == k and p == k:
                    tp += c
                elif t == k:
                    fn += c
                elif p == k:
                    fp += c
                else:
                    tn += c
        out.append((tp, fn, tn, fp))
    return out


def frac(a, b):
    return Fraction(a, b) if b else Fraction(0)


def oracle_bca(cm):
    parts = [(frac(tp, tp + fn) + frac(tn, tn + fp)) / 2 for tp, fn, tn, fp in oracle_counts(cm)]
    return float(sum(parts, Fraction(0)) / len(parts))


def oracle_macro_f1(cm):
    scores = []
    for tp, fn, tn, fp in oracle_counts(cm):
        p, r = frac(tp, tp + fp), frac(tp, tp + fn)
        scores.append(Fraction(0) if p + r == 0 else 2 * p * r / (p + r))
    return float(sum(scores, Fraction(0)) / len(scores))


def oracle_accuracy(cm):
    return float(frac(sum(int(cm[i][i]) for i in range(len(cm))), sum(int(x) for row in cm for x in row)))


def test_worked_confusion_matrix():
    cm = np.array([[5, 1, 0], [1, 3, 1], [0, 1, 4]])
    # CN: TP=5, FN=1; negatives are the 10 non-CN samples, one of them predicted CN
    assert sensitivity(cm, 0) == 5 / 6
    assert specificity(cm, 0) == 9 / 10
    expected = (Fraction(5, 6) + Fraction(9, 10) + Fraction(3, 5) + Fraction(9, 11)
                + Fraction(4, 5) + Fraction(10, 11)) / 6
    assert bca(cm) == float(expected)
    assert accuracy(cm) == 12 / 16


def test_perfect_matrix():
    cm = np.diag([4, 5, 6])
    assert bca(cm) == accuracy(cm) == macro_f1(cm) == 1.0
    assert all(sensitivity(cm, i) == specificity(cm, i) == 1.0 for i in range(3))


def test_degenerate_denominators_are_zero_and_flagged():
    cm = np.array([[2, 0], [2, 0]])
    assert f1_per_class(cm)[1] == 0.0
    assert macro_f1(cm) == pytest.approx(float(Fraction(2, 3) / 2))
    cm3 = np.array([[0, 0, 0], [0, 3, 1], [0, 1, 2]])
    assert sensitivity(cm3, 0) == 0.0
    assert degenerate_classes(cm3) == ["sens[0]"]


def test_random_confusion_matrices_match_hand_formulas():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        cm = rng.integers(0, 15, size=(3, 3))
        if rng.random() < 0.2:
            cm[rng.integers(3)] = 0  # an empty true class now and then
        assert bca(cm) == oracle_bca(cm)
        assert macro_f1(cm) == oracle_macro_f1(cm)
        assert accuracy(cm) == oracle_accuracy(cm)


def test_uniform_random_predictions_have_bca_near_half():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 3, size=20000)
    pred = rng.integers(0, 3, size=20000)
    assert abs(bca(confusion_matrix(y, pred)) - 0.5) < 0.03


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 2, 2, 1], [0, 2, 2, 1, 1])
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 1, 1]]
    assert cm.sum() == 5


def test_mauc_random_instances_equal_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 3, size=n)
        raw = rng.integers(0, 6, size=(n, 3)).astype(float) + 0.1  # coarse values force ties
        probs = raw / raw.sum(axis=1, keepdims=True)
        expected = brute_force_mauc(probs, y)
        got = mauc(probs, y)
        if np.isnan(expected):
            assert np.isnan(got)
        else:
            assert got == expected


def test_mauc_twelve_samples():
    rng = np.random.default_rng(0)
    y = np.array([0, 1, 2] * 4)
    probs = rng.dirichlet(np.ones(3), size=12)
    assert mauc(probs, y) == brute_force_mauc(probs, y)


def test_mauc_identity_cases():
    y = np.array([0, 0, 1, 1, 2, 2])
    assert mauc(np.eye(3)[y], y) == 1.0
    assert mauc(np.full((6, 3), 1 / 3), y) == 0.5


def test_mauc_skips_absent_class_pairs():
    y = np.array([1, 1, 2, 2])
    probs = np.array([[0.1, 0.8, 0.1], [0.2, 0.6, 0.2], [0.1, 0.2, 0.7], [0.1, 0.3, 0.6]])
    value, skipped = mauc(probs, y, return_skipped=True)
    assert skipped == [(0, 1), (0, 2)]
    assert value == 1.0
    assert np.isnan(mauc(probs[:2], y[:2]))


def test_mauc_same_on_logits_and_probabilities():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(40, 3))
    y = rng.integers(0, 3, size=40)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert mauc(np.log(probs), y) == mauc(probs, y)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mauc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 30))
    y = rng.integers(0, 3, size=n)
    probs = rng.dirichlet(np.ones(3), size=n)
    transformed = np.exp(3.0 * probs) + probs**3
    np.testing.assert_array_equal(mauc(transformed, y), mauc(probs, y))  # NaN-aware


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30))
def test_midranks_sum_and_ties(values):
    r = midranks(values)
    n = len(values)
    assert r.sum() == n * (n + 1) / 2
    for a in range(n):
        for b in range(n):
            if values[a] == values[b]:
                assert r[a] == r[b]
            elif values[a] < values[b]:
                assert r[a] < r[b]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=9, max_size=9))
def test_metric_ranges(cells):
    cm = np.array(cells).reshape(3, 3)
    for v in (bca(cm), accuracy(cm), macro_f1(cm)):
        assert 0.0 <= v <= 1.0
