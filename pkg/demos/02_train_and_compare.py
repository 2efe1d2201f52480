"""Train a Transformer and a GRU on a planted-signal cohort and compare them.

Both models see the same folds; the stability baseline (repeat the last
diagnosis) shows why converter sequences are the interesting subset.
Takes about two minutes on one core.
"""
# %%
from adprog.ingest import SynthConfig, generate_synthetic
from adprog.preprocess import FillerConfig, clean
from adprog.sequences import extract_sequences
from adprog.training import ALL_GROUPS, StabilityBaseline, TrainConfig, cross_validate, evaluate, pvalue_matrix

seqs = extract_sequences(clean(generate_synthetic(SynthConfig(n_subjects=600, converter_fraction=0.3,
                                                              signal_strength=3.0, rng_seed=1)))[0])
print(len(seqs), "sequences,", sum(s.is_converter for s in seqs), "converters")

# %%
models = {
    "Transformer": {"d_model": 32, "d_ffn": 64, "n_heads": 4},
    "GRU": {"hidden_dim": 32},
}
reports = {}
for kind, options in models.items():
    cfg = TrainConfig(model_kind=kind, model_options=options, lr=3e-3, max_epochs=15,
                      filler=FillerConfig(epochs=3))
    reports[kind] = cross_validate(seqs, cfg, k=5, split_seed=0, folds=[0, 1, 2]).report

# %% pooled metrics per subset, mean over folds
for kind, report in reports.items():
    s = report.aggregate()
    s = s[(s["group"] == ALL_GROUPS) & s["metric"].isin(["bca", "mauc", "accuracy"])]
    print(kind)
    print(s.pivot(index="subset", columns="metric", values="mean").round(3).to_string())

baseline = evaluate(StabilityBaseline(), seqs)
print("stability baseline converter accuracy:", baseline.value("accuracy", "converter"))

# %% Welch p-values over fold-level converter BCA
fold_bca = {k: r.fold_values("bca", "converter") for k, r in reports.items()}
print(pvalue_matrix(fold_bca).round(4).to_string())
