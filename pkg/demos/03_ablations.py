"""Which inputs matter? Feature-category and visit-history ablations.

Only the Cognitive category carries signal in this cohort, so removing it
should hurt most and isolating it should keep most of the performance.
Takes a few minutes on one core.
"""
# %%
from adprog.ablation import AblationSpec, category_suite, run_ablation_suite
from adprog.ingest import SynthConfig, generate_synthetic
from adprog.preprocess import FillerConfig, clean
from adprog.sequences import extract_sequences
from adprog.training import TrainConfig

seqs = extract_sequences(clean(generate_synthetic(SynthConfig(n_subjects=600, converter_fraction=0.3,
                                                              signal_strength=3.0, rng_seed=8)))[0])
cfg = TrainConfig(model_kind="GRU", model_options={"hidden_dim": 16}, lr=3e-3, max_epochs=10,
                  filler=FillerConfig(hidden_dim=16, epochs=2))

# %%
specs = category_suite("remove_category") + category_suite("isolate_category") + \
    [AblationSpec("history_last_k", k=k) for k in (1, 2, 4)]
table, results = run_ablation_suite(seqs, specs, cfg, k=5, folds=[0, 1])
print(table.round(3).to_string(index=False))
