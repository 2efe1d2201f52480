"""From a raw synthetic cohort to cross-validation folds.

Walks through the data side of the pipeline: generate a cohort with planted
reverters and multi-converters, hide a share of the diagnoses, clean it,
extract stable/converter sequences, balance them and lay out group-stratified
folds. Runs in a few seconds.
"""
# %%
from collections import Counter

from adprog.ingest import SynthConfig, corrupt_diagnoses, generate_synthetic
from adprog.preprocess import clean
from adprog.sequences import balance, count_summary, extract_sequences, stratified_kfold

cohort = generate_synthetic(SynthConfig(n_subjects=1000, converter_fraction=0.2, reverter_fraction=0.05,
                                        multi_converter_fraction=0.05, rng_seed=3))
cohort = corrupt_diagnoses(cohort, 0.3, seed=3)
print("subjects:", len(cohort), "visits:", sum(len(h.visits) for h in cohort))

# %% cleaning removes reverters, truncates multi-converters and drops visits without a diagnosis
cleaned, report = clean(cohort)
print(report.as_text())

# %% one sequence per subject; its group is the number of input visits
seqs = extract_sequences(cleaned)
summary = count_summary(seqs)
print(summary.table.to_string(index=False))
print("conversion kinds:", Counter(s.conversion_kind for s in seqs if s.is_converter))

# %% the balanced variant discards stable sequences group by group
balanced = balance(seqs, seed=0)
print(count_summary(balanced).table[["group", "stable", "converter"]].to_string(index=False))

# %% every fold tests about a tenth of each group
splits = stratified_kfold(seqs, k=10, seed=0)
by_group = {s.seq_id: s.group for s in seqs}
for sp in splits[:3]:
    print(f"fold {sp.fold_index}: test size {len(sp.test)}, per group {sorted(Counter(by_group[i] for i in sp.test).items())}")
