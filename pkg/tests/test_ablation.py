"""Feature-category masking, history truncation and the ablation driver."""
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adprog.ablation import (REPORT_COLUMNS, AblationSpec, apply_feature_mask, category_suite, feature_channels,
                             pct_change, run_ablation_suite, truncate_history)
from adprog.data_model import CATEGORIES, FEATURE_KEYS
from adprog.ingest import SynthConfig, generate_synthetic
from adprog.models.encoding import InputLayout, token_batch
from adprog.preprocess import FillerConfig, clean
from adprog.sequences import extract_sequences
from adprog.training import TrainConfig
from conftest import toy_sequence


def test_remove_cognitive_leaves_twelve():
    keep = feature_channels("remove_category", "Cognitive")
    assert len(keep) == 12
    seq = toy_sequence([0, 6, 12], [0, 0, 1], seed=0)
    (masked,) = apply_feature_mask([seq], "remove_category", "Cognitive")
    assert all(tuple(v.features) == keep for v in masked.visits)
    batch = token_batch([masked], InputLayout(keep))
    assert batch.x.shape[-1] == 3 + 12 + 1  # DX and time channels stay


def test_isolate_mri_keeps_seven():
    assert len(feature_channels("isolate_category", "MRI")) == 7


@pytest.mark.parametrize("category", CATEGORIES)
def test_remove_and_isolate_are_complementary(category):
    removed = set(feature_channels("remove_category", category))
    isolated = set(feature_channels("isolate_category", category))
    assert removed.isdisjoint(isolated)
    assert removed | isolated == set(FEATURE_KEYS)


def test_mask_keeps_diagnosis_and_months():
    seq = toy_sequence([0, 6, 12], [0, 1, 1], seed=1)
    (masked,) = apply_feature_mask([seq], "isolate_category", "Biomarker")
    assert [v.diagnosis for v in masked.visits] == [v.diagnosis for v in seq.visits]
    assert [v.exam_month for v in masked.visits] == [0, 6, 12]
    assert masked.label == seq.label and masked.group == seq.group


def test_truncate_examples():
    seq = toy_sequence([0, 6, 12, 18, 24], [1, 1, 1, 1, 2], seed=0)
    short = truncate_history(seq, 1)
    assert [v.exam_month for v in short.visits] == [18, 24]
    assert short.group == 1 and short.label == "converter"
    assert [v.months_to_final for v in short.visits] == [6.0, 0.0]
    three = toy_sequence([0, 6, 12], [0, 0, 0], seed=0)
    assert truncate_history(three, 4) is three
    with pytest.raises(ValueError):
        truncate_history(seq, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0, 1]), min_size=2, max_size=9), st.integers(1, 9))
def test_truncate_preserves_target_and_label(tail, k):
    dxs = sorted(tail)  # non-decreasing DX path
    seq = toy_sequence([6 * i for i in range(len(dxs))], dxs, seed=k)
    out = truncate_history(seq, k)
    last, orig = out.visits[-1], seq.visits[-1]
    assert (last.exam_month, last.diagnosis, dict(last.features)) == \
        (orig.exam_month, orig.diagnosis, dict(orig.features))
    assert out.label == seq.label and out.target_dx == seq.target_dx
    assert out.group == min(k, seq.group)


def test_pct_change():
    assert pct_change(0.830, 0.874) == pytest.approx(-5.0343, abs=1e-4)
    assert pct_change(0.736, 0.874) == pytest.approx(-15.7895, abs=1e-4)
    assert pct_change(0.61, 0.61) == 0.0
    with pytest.raises(ZeroDivisionError):
        pct_change(0.5, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1))
def test_pct_change_monotone(a, b, base):
    if a <= b:
        assert pct_change(a, base) <= pct_change(b, base)


def test_spec_validation():
    assert AblationSpec("history_last_k", k=4).detail == "k=4"
    assert AblationSpec("remove_category", category="MRI").detail == "MRI"
    for bad in [dict(kind="history_last_k"), dict(kind="remove_category"), dict(kind="drop", category="MRI"),
                dict(kind="isolate_category", category="MRI", k=2), dict(kind="history_last_k", k=0)]:
        with pytest.raises(ValueError):
            AblationSpec(**bad)
    assert [s.category for s in category_suite("remove_category")] == list(CATEGORIES)


def test_suite_report_shape():
    hs, _ = clean(generate_synthetic(SynthConfig(n_subjects=120, rng_seed=2, signal_strength=3.0)))
    seqs = extract_sequences(hs)
    cfg = TrainConfig(model_kind="minRNN", model_options={"hidden_dim": 4}, max_epochs=1,
                      filler=FillerConfig(hidden_dim=4, epochs=1))
    report, results = run_ablation_suite(seqs, category_suite("remove_category"), cfg, k=3, folds=[0])
    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == 3
    assert set(results) == {"baseline", *((s.kind, s.detail) for s in category_suite("remove_category"))}
    base = results["baseline"].report.value("bca", fold=0)
    row = report.iloc[0]
    assert row["pct_change_vs_baseline"] == pytest.approx(pct_change(row["mean_bca"], base))
    # every run tests the same subjects
    ids = {tuple(r.outcomes[0].test_ids) for r in results.values()}
    assert len(ids) == 1
