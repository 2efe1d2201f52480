"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` (the verdict
lines are printed even without ``-s``). The two learning experiments take
several minutes on one CPU core.
"""
import time

import numpy as np
import pytest

from adprog import numcore as nc
from adprog.ablation import AblationSpec, pct_change, run_ablation_suite
from adprog.data_model import FEATURE_KEYS
from adprog.ingest import SynthConfig, corrupt_diagnoses, generate_synthetic
from adprog.metrics import accuracy, bca, macro_f1, mauc
from adprog.models import RNNModel, RnnConfig, TransformerConfig, TransformerModel
from adprog.preprocess import FillerConfig, apply_norm, clean, fit_norm, missing_count, model_fill, train_filler
from adprog.sequences import balance, extract_sequences, stratified_kfold
from adprog.stats import mann_whitney_u, welch_t_test
from adprog.training import ALL_GROUPS, StabilityBaseline, TrainConfig, cross_validate, evaluate
from conftest import check_params, toy_sequence
from test_metrics import brute_force_mauc, oracle_accuracy, oracle_bca, oracle_macro_f1
from test_stats import pairwise_u, quadrature_welch_p


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then assert it."""
    def _verdict(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return _verdict


# ---------------------------------------------------------------------------
# 1. metric oracle equivalence


def test_metric_oracle_equivalence(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    mauc_mismatch = 0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 3, size=n)
        raw = rng.integers(0, 8, size=(n, 3)).astype(float) + 0.5
        probs = raw / raw.sum(axis=1, keepdims=True)
        want, got = brute_force_mauc(probs, y), mauc(probs, y)
        same = (np.isnan(want) and np.isnan(got)) or want == got
        mauc_mismatch += not same
    cm_mismatch = 0
    for _ in range(100):
        cm = rng.integers(0, 20, size=(3, 3))
        cm_mismatch += (bca(cm) != oracle_bca(cm)) + (macro_f1(cm) != oracle_macro_f1(cm)) \
            + (accuracy(cm) != oracle_accuracy(cm))
    elapsed = time.perf_counter() - start
    verdict("metric oracle equivalence", mauc_mismatch == 0 and cm_mismatch == 0 and elapsed < 10,
            f"mAUC mismatches {mauc_mismatch}/200, confusion-matrix mismatches {cm_mismatch}/300, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. statistical tests


def test_statistical_tests(verdict):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        n1, n2 = rng.integers(2, 15, size=2)
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2.0), size=n1)
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2.0), size=n2)
        worst = max(worst, abs(welch_t_test(a, b).p - quadrature_welch_p(a, b)[2]))
    u_mismatch = 0
    for _ in range(200):
        a = rng.integers(0, 10, size=int(rng.integers(1, 30)))
        b = rng.integers(0, 10, size=int(rng.integers(1, 30)))
        u_mismatch += mann_whitney_u(a, b).u != pairwise_u(a, b)
    same = [0.71, 0.74, 0.69, 0.73, 0.70]
    identical_p = (float(welch_t_test(same, same).p), float(mann_whitney_u(same, same).p))
    ok = worst < 1e-8 and u_mismatch == 0 and identical_p == (1.0, 1.0)
    verdict("statistical tests", ok,
            f"max |Welch p - quadrature| {worst:.2e}, U mismatches {u_mismatch}/200, identical-sample p {identical_p}")


# ---------------------------------------------------------------------------
# 3. gradient correctness


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return nc.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _proj(out):
    w = np.random.default_rng(7).normal(size=out.shape)
    return nc.sum_(nc.mul(out, nc.Tensor(w)))


def _op_cases(rng):
    a, b, v = _leaf(rng, 3, 4, 5), _leaf(rng, 3, 4, 5), _leaf(rng, 5)
    pos = _leaf(rng, 3, 4, low=0.2, high=2.0)
    kinked = nc.Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    m = _leaf(rng, 5, 2)
    g, beta = _leaf(rng, 5), _leaf(rng, 5)
    table = _leaf(rng, 6, 3)
    logits = _leaf(rng, 4, 3)
    mask = rng.random((3, 4, 5)) < 0.5
    return {
        "add": (lambda: _proj(nc.add(a, v)), {"a": a, "v": v}),
        "sub": (lambda: _proj(nc.sub(a, b)), {"a": a, "b": b}),
        "mul": (lambda: _proj(nc.mul(a, v)), {"a": a, "v": v}),
        "scale": (lambda: _proj(nc.scale(a, -1.7)), {"a": a}),
        "affine": (lambda: _proj(nc.affine(a, 0.5, 2.0)), {"a": a}),
        "sigmoid": (lambda: _proj(nc.sigmoid(a)), {"a": a}),
        "tanh": (lambda: _proj(nc.tanh(a)), {"a": a}),
        "relu": (lambda: _proj(nc.relu(kinked)), {"k": kinked}),
        "exp": (lambda: _proj(nc.exp(a)), {"a": a}),
        "log": (lambda: _proj(nc.log(pos)), {"p": pos}),
        "square": (lambda: _proj(nc.square(a)), {"a": a}),
        "sum": (lambda: _proj(nc.sum_(a, axis=1)), {"a": a}),
        "mean": (lambda: _proj(nc.mean(a, axis=-1, keepdims=True)), {"a": a}),
        "reshape": (lambda: _proj(nc.reshape(a, (12, 5))), {"a": a}),
        "transpose": (lambda: _proj(nc.transpose(a, (1, 2, 0))), {"a": a}),
        "swap_last": (lambda: _proj(nc.swap_last(a)), {"a": a}),
        "slice": (lambda: _proj(nc.slice_(a, (slice(None), 1))), {"a": a}),
        "concat": (lambda: _proj(nc.concat([a, b], axis=1)), {"a": a, "b": b}),
        "stack": (lambda: _proj(nc.stack([a, b], axis=0)), {"a": a, "b": b}),
        "matmul": (lambda: _proj(nc.matmul(a, m)), {"a": a, "m": m}),
        "softmax": (lambda: _proj(nc.softmax(a, axis=-1)), {"a": a}),
        "log_softmax": (lambda: _proj(nc.log_softmax(a, axis=-1)), {"a": a}),
        "layer_norm": (lambda: _proj(nc.layer_norm(a, g, beta)), {"a": a, "g": g, "beta": beta}),
        "dropout": (lambda: _proj(nc.dropout(a, 0.25, True, (1, 2, 3))), {"a": a}),
        "masked_fill": (lambda: _proj(nc.masked_fill(a, mask, -2.0)), {"a": a}),
        "embedding_lookup": (lambda: _proj(nc.embedding_lookup(table, np.array([[0, 5], [5, 2]]))), {"t": table}),
        "where": (lambda: _proj(nc.where(mask, a, b)), {"a": a, "b": b}),
        "cross_entropy": (lambda: nc.cross_entropy(logits, np.array([0, 2, 1, 2]), np.array([1.0, 0.5, 2.0, 1.0])),
                          {"l": logits}),
        "masked_mse": (lambda: nc.masked_mse(a, np.zeros((3, 4, 5)), mask), {"a": a}),
    }


def test_gradient_correctness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    errors = {name: check_params(fn, leaves) for name, (fn, leaves) in _op_cases(rng).items()}
    seqs = [toy_sequence([0, 6, 18], [0, 0, 1], seed=1, missing=0.2, subject="A"),
            toy_sequence([0, 12, 18], [1, 1, 1], seed=2, subject="B")]
    for cell in ("LSTM", "GRU", "minRNN"):
        model = RNNModel(RnnConfig(cell=cell, hidden_dim=4), seed=5, dtype=np.float64)
        batch = model.make_batch(seqs)
        errors[cell] = check_params(lambda: model.batch_loss(batch), dict(model.params.items()))
    worst_op = max(errors.values())
    tf = TransformerModel(TransformerConfig(d_model=8, d_ffn=16, n_heads=2, dropout=0.1), seed=1, dtype=np.float64)
    tf_batch = tf.make_batch(seqs)  # two input visits plus the target visit each
    tf_err = check_params(lambda: tf.batch_loss(tf_batch, train=True, step=3, seed=11),
                          dict(tf.params.items()), max_coords=3)
    elapsed = time.perf_counter() - start
    worst_name = max(errors, key=errors.get)
    ok = worst_op < 1e-4 and tf_err < 1e-3 and elapsed < 60
    verdict("gradient correctness", ok,
            f"{len(errors) - 3} ops + 3 cells max rel err {worst_op:.1e} ({worst_name}), "
            f"full Transformer {tf_err:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. preprocessing invariants


def test_preprocessing_invariants(verdict):
    cohort = generate_synthetic(SynthConfig(n_subjects=2000, rng_seed=404, reverter_fraction=0.05,
                                            multi_converter_fraction=0.05))
    corrupted = corrupt_diagnoses(cohort, 0.3011, seed=4)
    total = sum(len(h.visits) for h in corrupted)
    dx_missing = sum(v.diagnosis is None for h in corrupted for v in h.visits) / total
    cleaned, report = clean(corrupted)
    violations = 0
    for h in cleaned:
        dx = h.diagnoses
        violations += None in dx
        violations += len(dx) < 2
        violations += any(b < a for a, b in zip(dx, dx[1:]))
        violations += sum(b > a for a, b in zip(dx, dx[1:])) > 1
    again, _ = clean(cleaned)
    idempotent = again == cleaned
    stats = fit_norm(cleaned)
    filler = train_filler(apply_norm(cleaned, stats), FillerConfig(hidden_dim=16, epochs=2, seed=0))
    filled = model_fill(cleaned, filler, stats)
    altered = sum(v.features[k] != w.features[k]
                  for h, f in zip(cleaned, filled) for v, w in zip(h.visits, f.visits)
                  for k in FEATURE_KEYS if v.features[k] is not None)
    removed = report.dropped_reverter_subjects > 0 and report.truncated_multi_converters > 0
    ok = violations == 0 and idempotent and missing_count(filled) == 0 and altered == 0 and removed
    verdict("preprocessing invariants", ok,
            f"DX missing {dx_missing:.2%}, postcondition violations {violations}, idempotent {idempotent}, "
            f"missing after fill {missing_count(filled)} (before {missing_count(cleaned)}), observed cells altered "
            f"{altered}, reverters dropped {report.dropped_reverter_subjects}, "
            f"multi-converters truncated {report.truncated_multi_converters}")


# ---------------------------------------------------------------------------
# 5. sequence and group contracts


def test_sequence_group_contracts(verdict):
    hs, _ = clean(generate_synthetic(SynthConfig(n_subjects=2000, converter_fraction=0.15, rng_seed=505)))
    seqs = extract_sequences(hs)
    ids = [s.seq_id for s in seqs]
    one_group = len(ids) == len(set(ids)) and all(s.group == len(s.visits) - 1 for s in seqs)
    bal = balance(seqs, seed=5)
    per_group = {}
    for s in bal:
        per_group.setdefault(s.group, [0, 0])[s.is_converter] += 1
    balanced = all(st == cv for st, cv in per_group.values())
    splits = stratified_kfold(seqs, k=10, seed=5)
    tests = [sp.test for sp in splits]
    disjoint = sum(len(t) for t in tests) == len(set().union(*tests)) == len(seqs)
    worst_dev = 0.0
    for g in sorted({s.group for s in seqs}):
        members = {s.seq_id for s in seqs if s.group == g}
        for t in tests:
            worst_dev = max(worst_dev, abs(len(t & members) - len(members) / 10))
    ok = one_group and balanced and disjoint and worst_dev < 1
    verdict("sequence/group contracts", ok,
            f"{len(seqs)} sequences each in one group {one_group}, balanced per group {balanced} "
            f"({sum(per_group[g][0] for g in per_group)} + {sum(per_group[g][1] for g in per_group)}), "
            f"test sets disjoint and covering {disjoint}, max deviation from 10% share {worst_dev:.2f} sequences")


# ---------------------------------------------------------------------------
# 6. percent-change arithmetic


def test_percent_change_arithmetic(verdict):
    history = pct_change(0.830, 0.874)
    category = pct_change(0.736, 0.874)
    ok = abs(history - (-5.040)) <= 0.15 and abs(category - (-15.761)) <= 0.15
    verdict("percent-change arithmetic", ok,
            f"history {history:.3f}% vs -5.040%, category {category:.3f}% vs -15.761% (tolerance 0.15 points)")


# ---------------------------------------------------------------------------
# 7. end-to-end synthetic learning

E2E_COHORT = SynthConfig(n_subjects=800, converter_fraction=0.3, signal_strength=3.0, rng_seed=1)
E2E_MODELS = {
    "Transformer": {"d_model": 32, "d_ffn": 64, "n_heads": 4},
    "LSTM": {"hidden_dim": 32},
    "GRU": {"hidden_dim": 32},
    "minRNN": {"hidden_dim": 32},
}


def e2e_config(kind):
    return TrainConfig(model_kind=kind, model_options=E2E_MODELS[kind], lr=3e-3, max_epochs=20, batch_size=32,
                       filler=FillerConfig(epochs=4))


def test_end_to_end_synthetic_learning(verdict):
    start = time.perf_counter()
    seqs = extract_sequences(clean(generate_synthetic(E2E_COHORT))[0])
    baseline = evaluate(StabilityBaseline(), seqs).value("accuracy", "converter")
    lines, ok = [], baseline == 0.0
    for kind in E2E_MODELS:
        summary = cross_validate(seqs, e2e_config(kind), k=5, split_seed=1).summary
        summary = summary[summary["group"] == ALL_GROUPS].set_index(["subset", "metric"])["mean"]
        overall_mauc, conv_bca = summary[("overall", "mauc")], summary[("converter", "bca")]
        conv_acc = summary[("converter", "accuracy")]
        ok &= overall_mauc >= 0.85 and conv_bca >= 0.6 and conv_acc > baseline
        lines.append(f"{kind} mAUC {overall_mauc:.3f} converter BCA {conv_bca:.3f} converter acc {conv_acc:.3f}")
    minutes = (time.perf_counter() - start) / 60
    ok &= minutes < 15
    verdict("end-to-end synthetic learning", ok,
            "; ".join(lines) + f"; stability converter acc {baseline:.1f}; {minutes:.1f} min")


# ---------------------------------------------------------------------------
# 8. direction-matching ablations

ABLATION_COHORT = SynthConfig(n_subjects=800, converter_fraction=0.3, signal_strength=3.0, rng_seed=8,
                              category_signal={"Cognitive": 1.0, "MRI": 0.0, "Biomarker": 0.0})
ABLATION_SPECS = [AblationSpec("remove_category", category=c) for c in ("Cognitive", "MRI", "Biomarker")] + \
                 [AblationSpec("isolate_category", category=c) for c in ("Cognitive", "MRI", "Biomarker")] + \
                 [AblationSpec("history_last_k", k=1)]


def test_direction_matching_ablations(verdict):
    seqs = extract_sequences(clean(generate_synthetic(ABLATION_COHORT))[0])
    cfg = TrainConfig(model_kind="GRU", model_options={"hidden_dim": 16}, lr=3e-3, max_epochs=12,
                      filler=FillerConfig(hidden_dim=16, epochs=2))
    table, results = run_ablation_suite(seqs, ABLATION_SPECS, cfg, k=5, split_seed=8, folds=[0, 1, 2])
    base = float(np.mean(results["baseline"].report.fold_values("bca")))
    score = {(r.spec_kind, r.detail): r.mean_bca for r in table.itertuples()}
    removal = {c: score[("remove_category", c)] for c in ("Cognitive", "MRI", "Biomarker")}
    isolation = {c: score[("isolate_category", c)] for c in ("Cognitive", "MRI", "Biomarker")}
    truncated = score[("history_last_k", "k=1")]
    largest_drop = min(removal, key=removal.get) == "Cognitive"
    best_isolated = max(isolation, key=isolation.get) == "Cognitive"
    ok = largest_drop and best_isolated and truncated < base
    fmt = lambda d: ", ".join(f"{k} {v:.3f}" for k, v in d.items())  # noqa: E731
    verdict("direction-matching ablations", ok,
            f"baseline BCA {base:.3f}; remove: {fmt(removal)}; isolate: {fmt(isolation)}; last-1 history {truncated:.3f}")


# ---------------------------------------------------------------------------
# 9. reproducibility


def test_pipeline_reproducibility(verdict, tmp_path):
    from test_cli import STAGES, TINY, run_stages, tree, write_config

    config = write_config(tmp_path, TINY)
    codes = run_stages(config, tmp_path / "first") + run_stages(config, tmp_path / "second")
    first, second = tree(tmp_path / "first"), tree(tmp_path / "second")
    reports = [k for k in first if k.startswith("report/")]
    ckpts = [k for k in first if k.endswith(".ckpt")]
    differing = [k for k in first if first.get(k) != second.get(k)]
    ok = set(codes) == {0} and first.keys() == second.keys() and not differing and reports and ckpts
    verdict("reproducibility", ok,
            f"{len(STAGES)} stages twice, {len(reports)} report CSVs and {len(ckpts)} checkpoints, "
            f"differing files {differing or 'none'}")
