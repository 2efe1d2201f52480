"""Cleaning rules, temporal feature, normalisation and model filling."""
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adprog.data_model import FEATURE_KEYS, Diagnosis, SubjectHistory, make_visit
from adprog.ingest import SynthConfig, corrupt_diagnoses, generate_synthetic
from adprog.preprocess import (FillerConfig, UntrainedFillerError, Filler, add_months_to_final, apply_norm, clean,
                               fit_norm, mean_fill, missing_count, model_fill, train_filler, unapply_norm)
from adprog.models.rnn import RNNModel, RnnConfig

CN, MCI, AD = Diagnosis.CN, Diagnosis.MCI, Diagnosis.AD


def subject(dxs, sid="A", values=None):
    return SubjectHistory(sid, tuple(make_visit(sid, 6 * i, d, values) for i, d in enumerate(dxs)))


def test_single_visit_dropped():
    out, report = clean([subject([CN])])
    assert out == [] and report.dropped_single_visit_subjects == 1


def test_reverter_dropped():
    out, report = clean([subject([MCI, CN, MCI])])
    assert out == [] and report.dropped_reverter_subjects == 1


def test_multi_converter_truncated_after_first_conversion():
    out, report = clean([subject([CN, MCI, MCI, AD, AD])])
    assert out[0].diagnoses == [CN, MCI]
    assert report.truncated_multi_converters == 1


def test_missing_dx_visits_dropped():
    out, report = clean([subject([CN, None, CN])])
    assert out[0].diagnoses == [CN, CN]
    assert report.dropped_missing_dx_visits == 1


def test_step_four_can_create_single_visit_subjects():
    out, report = clean([subject([CN, None])])
    assert out == []
    assert report.dropped_single_visit_subjects == 1 and report.dropped_missing_dx_visits == 1


def test_reverter_test_ignores_missing_dx():
    out, _ = clean([subject([MCI, None, MCI, AD])])
    assert out[0].diagnoses == [MCI, MCI, AD]


dx_lists = st.lists(st.sampled_from([CN, MCI, AD, None]), min_size=1, max_size=7)


@settings(max_examples=150, deadline=None)
@given(st.lists(dx_lists, min_size=1, max_size=6))
def test_clean_postconditions_and_idempotence(cohort):
    hs = [subject(dxs, sid=f"S{i}") for i, dxs in enumerate(cohort)]
    out, report = clean(hs)
    for h in out:
        dx = h.diagnoses
        assert None not in dx and len(dx) >= 2
        assert all(b >= a for a, b in zip(dx, dx[1:]))
        assert sum(b > a for a, b in zip(dx, dx[1:])) <= 1
    again, second = clean(out)
    assert again == out
    assert second.as_text() == "dropped_single_visit_subjects=0\ndropped_reverter_subjects=0\n" \
                               "truncated_multi_converters=0\ndropped_missing_dx_visits=0\n"
    assert min(report.__dict__.values()) >= 0


def test_months_to_final():
    h = add_months_to_final(subject([CN, CN, MCI]))
    assert [v.months_to_final for v in h.visits] == [12.0, 6.0, 0.0]
    h2 = add_months_to_final(SubjectHistory("B", (make_visit("B", 3, CN), make_visit("B", 21, CN))))
    assert [v.months_to_final for v in h2.visits] == [18.0, 0.0]
    with pytest.raises(ValueError):
        add_months_to_final(subject([CN]))


def test_norm_hand_values():
    hs = [subject([CN, CN, CN], values=None)]
    visits = tuple(v.with_features({**v.features, "ADAS13": float(i + 1), "MMSE": 5.0})
                   for i, v in enumerate(hs[0].visits))
    hs = [replace(hs[0], visits=visits)]
    stats = fit_norm(hs)
    normed = apply_norm(hs, stats)
    got = [v.features["ADAS13"] for v in normed[0].visits]
    np.testing.assert_allclose(got, [-1.224744871391589, 0.0, 1.224744871391589], rtol=1e-12)
    assert [v.features["MMSE"] for v in normed[0].visits] == [0.0, 0.0, 0.0]
    assert stats.std["MMSE"] == 1.0
    assert all(v.features["CDRSB"] is None for v in normed[0].visits)


def test_norm_round_trip():
    hs = generate_synthetic(SynthConfig(n_subjects=40, rng_seed=1))
    stats = fit_norm(hs)
    back = unapply_norm(apply_norm(hs, stats), stats)
    for h, b in zip(hs, back):
        for v, w in zip(h.visits, b.visits):
            for k in FEATURE_KEYS:
                if v.features[k] is None:
                    assert w.features[k] is None
                else:
                    assert w.features[k] == pytest.approx(v.features[k], rel=1e-10, abs=1e-10)


def _filler(hs, epochs=2):
    stats = fit_norm(hs)
    return stats, train_filler(apply_norm(hs, stats), FillerConfig(epochs=epochs, hidden_dim=8, seed=0))


def test_model_fill_requires_trained_filler():
    hs = generate_synthetic(SynthConfig(n_subjects=5, rng_seed=1))
    untrained = Filler(RNNModel(RnnConfig(cell="minRNN", hidden_dim=4)))
    with pytest.raises(UntrainedFillerError):
        model_fill(hs, untrained, fit_norm(hs))


def test_model_fill_complete_history_unchanged_and_observed_cells_kept():
    hs = generate_synthetic(SynthConfig(n_subjects=30, rng_seed=2))
    stats, filler = _filler(hs)
    complete = [h for h in generate_synthetic(SynthConfig(n_subjects=3, rng_seed=4, missingness={k: 0.0 for k in FEATURE_KEYS}))]
    assert model_fill(complete, filler, stats) == complete
    filled = model_fill(hs, filler, stats)
    assert missing_count(filled) == 0
    for h, f in zip(hs, filled):
        for v, w in zip(h.visits, f.visits):
            for k in FEATURE_KEYS:
                if v.features[k] is not None:
                    assert w.features[k] == v.features[k]


def test_first_visit_gap_takes_training_mean():
    hs = generate_synthetic(SynthConfig(n_subjects=30, rng_seed=2))
    stats, filler = _filler(hs)
    probe = subject([CN, CN], sid="P", values={k: stats.mean[k] + stats.std[k] for k in FEATURE_KEYS})
    first = probe.visits[0].with_features({**probe.visits[0].features, "ADAS13": None})
    probe = replace(probe, visits=(first, probe.visits[1]))
    (filled,) = model_fill([probe], filler, stats)
    assert filled.visits[0].features["ADAS13"] == pytest.approx(stats.mean["ADAS13"], rel=1e-12)
    (normed,) = apply_norm([filled], stats)
    assert normed.visits[0].features["ADAS13"] == pytest.approx(0.0, abs=1e-9)


def test_model_fill_beats_mean_imputation_on_hidden_cells():
    hs, _ = clean(generate_synthetic(SynthConfig(n_subjects=300, rng_seed=3, signal_strength=2.0)))
    rng = np.random.default_rng(0)
    hidden, masked = [], []
    for si, h in enumerate(hs):
        visits = []
        for vi, v in enumerate(h.visits):
            feats = dict(v.features)
            if vi > 0:
                for k in FEATURE_KEYS:
                    if feats[k] is not None and rng.random() < 0.1:
                        hidden.append((si, vi, k, feats[k]))
                        feats[k] = None
            visits.append(v.with_features(feats))
        masked.append(replace(h, visits=tuple(visits)))
    stats = fit_norm(masked)
    filler = train_filler(apply_norm(masked, stats), FillerConfig(epochs=8, seed=0))

    def rmse(out):
        return np.sqrt(np.mean([((out[s].visits[v].features[k] - x) / stats.std[k]) ** 2 for s, v, k, x in hidden]))

    assert rmse(model_fill(masked, filler, stats)) <= rmse(mean_fill(masked, stats))


def test_filler_training_is_deterministic():
    hs = generate_synthetic(SynthConfig(n_subjects=20, rng_seed=6))
    _, a = _filler(hs)
    _, b = _filler(hs)
    assert a.history == b.history


def test_corrupted_cohort_cleans_to_complete_dx():
    hs = corrupt_diagnoses(generate_synthetic(SynthConfig(n_subjects=100, rng_seed=8)), 0.3, seed=1)
    out, report = clean(hs)
    assert report.dropped_missing_dx_visits > 0
    assert all(None not in h.diagnoses for h in out)
