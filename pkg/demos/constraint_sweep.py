"""Accuracy of each method across delay and energy budgets on the default fleet.

Run with ``python3 demos/constraint_sweep.py`` (about ten seconds per seed).
"""

from __future__ import annotations

from moe2.harness import ExperimentConfig, run_experiment

config = ExperimentConfig(seeds=(0, 1))
table = run_experiment(config)

for tau in config.tau_grid:
    print(f"\n--- tau_max = {tau:g} s, accuracy (%) ---")
    print(table.to_csv(tau), end="")

# %% which subsets did the lattice search pick?
for row in table.select(method="smo_mv", seed=0, tau_max=2.0):
    print(f"E_max={row.e_max:>4g} J  mask={row.mask}  energy={row.energy:.2f} J")
