"""
Reading phenotypes off a fitted model
=====================================

Each column of V is a phenotype: a weighted bundle of features. Slices join
the phenotype where their s_k is largest. This walks the same path as the
``export-phenotypes`` and ``export-trajectories`` commands, in memory.
"""

import numpy as np

from mtparafac2 import SynthSpec, TrainConfig, fit, synth_generate
from mtparafac2.cli import phenotype_rows, subgroups, trajectory_rows

tensor, labels, _ = synth_generate(SynthSpec(K=80, J=12, R_true=3, noise_sd=0.1, label_noise=0.1, seed=1))

# a small l1 weight on V zeroes the weakest loadings; supervision is left off here
# because on 80 slices the heads pull s_k towards the labels and empty two subgroups
cfg = TrainConfig(R=3, seed=1, mode="unsupervised")
cfg.penalties.c2 = 0.005
model = fit(tensor, None, cfg).model
print("zero loadings in V:", int(np.sum(model.V == 0)), "of", model.V.size)

groups = subgroups(model)
print("subgroup sizes:", np.bincount(groups, minlength=model.R))

# top three features per phenotype, with the subgroup's average observed value
for row in phenotype_rows(model, tensor, top_n=3):
    avg = "n/a" if row["average"] is None else f"{row['average']:+.3f}"
    print(f"phenotype {row['phenotype']} #{row['rank']} {row['feature']:<10} "
          f"weight {row['weight']:+.3f} n={row['subgroup_size']} avg {avg}")

# mean trajectory of one feature over slices of a common length
length = int(np.bincount(tensor.I).argmax())
for row in trajectory_rows(model, tensor, tensor.feature_names[0], length)[:length]:
    print(f"phenotype {row['phenotype']} (n={row['n_slices']}) t={row['t']} mean {row['mean']:+.3f}")
