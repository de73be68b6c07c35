from __future__ import annotations

import json

import numpy as np
import pytest
from scipy import stats

from moe2.domain import ConstraintSet, SubsetMask, seeded_rng
from moe2.gating import TrainConfig
from moe2.harness import (
    ExperimentConfig, ResultTable, average_expert_accuracy, build_scenario, expert_accuracies,
    run_baseline_majority_vote, run_experiment, run_moe2, run_replicate, sample_feasible_mask,
    single_agent_accuracy,
)
from moe2.inference import InferenceConfig, generate_answer, score_accuracy
from moe2.smo import Feasibility, InfeasibleProblem
from moe2.synth import FAST_TIER, SLOW_TIER, FleetSpec, HardwareTier, WorkloadSpec


def small_config(**kw) -> ExperimentConfig:
    base = dict(
        workload=WorkloadSpec(n_prompts=120, embedding_dim=8, n_clusters=4, vocab_size=16),
        fleet=FleetSpec(n_experts=4, k_clusters=4, hardware_tiers=(
            HardwareTier("fast", 1, FAST_TIER.ranges), HardwareTier("slow", 3, SLOW_TIER.ranges))),
        train=TrainConfig(epochs=8, hidden_dims=(16,)),
        tau_grid=(1.0, 3.0), energy_grid=(3.0, 10.0),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def scen():
    return build_scenario(small_config(), seed=0)


def test_scenario_split(scen):
    assert len(scen.test_idx) == 24 and len(scen.train_idx) == 96
    assert set(scen.test_idx).isdisjoint(scen.train_idx)
    assert len(scen.fleet) == 4 and scen.training is not None


def test_single_member_vote_equals_that_expert(scen):
    out = run_baseline_majority_vote(SubsetMask(0b0100, 4), scen)
    answers = [generate_answer(None, [2], p, scen.fleet, InferenceConfig(), 16) for p in scen.test_workload]
    assert out.accuracy == pytest.approx(score_accuracy(answers, scen.test_workload))
    assert out.accuracy == pytest.approx(expert_accuracies(scen)[2])


def test_moe2_with_all_experts_and_k_none_uses_gate(scen):
    full = SubsetMask.full(4)
    out = run_moe2(full, scen, None)
    answers = [generate_answer(scen.theta, full, p, scen.fleet, InferenceConfig(k=None), 16)
               for p in scen.test_workload]
    assert out.accuracy == pytest.approx(score_accuracy(answers, scen.test_workload))


def test_average_expert_accuracy_bounds(scen):
    acc = expert_accuracies(scen)
    assert acc.min() <= average_expert_accuracy(scen) <= acc.max()


def test_single_agent_outcome(scen):
    out = single_agent_accuracy(scen)
    assert 0.0 <= out.accuracy <= 1.0 and out.mask is None and out.energy > 0


def test_random_masks_are_uniform_over_the_feasible_family():
    feasible = lambda S: S != 0b1111
    rng = seeded_rng(0)
    draws = [sample_feasible_mask(feasible, 4, rng)[0].bits for _ in range(4000)]
    counts = np.bincount(draws, minlength=16)[1:15]
    assert counts.sum() == 4000
    assert stats.chisquare(counts).pvalue > 1e-3


def test_random_mask_gives_up():
    with pytest.raises(InfeasibleProblem):
        sample_feasible_mask(lambda S: False, 3, seeded_rng(0), max_draws=10)


def test_replicate_rows_and_feasibility(scen):
    config = small_config()
    rows = run_replicate(config, 0, scen)
    methods = {r.method for r in rows}
    assert methods == set(config.methods)
    assert len(rows) == len(config.cells()) * len(config.methods)
    for r in rows:
        if r.method in ("moe2", "smo_mv", "rand_mv") and r.status == "ok":
            c = ConstraintSet.uniform(r.tau_max, r.e_max, 2)
            mask = SubsetMask.from_array([ch == "1" for ch in r.mask])
            assert Feasibility(scen.costs, c)(mask)
            # routed costs never exceed the subset's expected costs
            exp = scen.costs.expected(mask)
            assert r.energy <= exp.energy + 1e-12
            assert np.all(np.array(r.delay_by_class) <= exp.delay_by_class + 1e-12)


def test_infeasible_cells_are_reported():
    config = small_config(energy_grid=(1e-6,), tau_grid=(1.0,))
    rows = run_experiment(config).rows
    constrained = [r for r in rows if r.method in ("moe2", "smo_mv", "rand_mv")]
    assert constrained and all(r.status == "infeasible" and r.accuracy is None for r in constrained)


def test_experiment_is_deterministic_and_round_trips():
    config = small_config(tau_grid=(3.0,), energy_grid=(10.0,), seeds=(0, 1))
    a = run_experiment(config)
    b = run_experiment(config)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    back = ResultTable.from_dict(json.loads(json.dumps(a.to_dict())))
    assert back.rows == a.rows
    csv = a.to_csv(3.0)
    assert csv.splitlines()[0] == "method,E_max=10"
    assert any(line.startswith("moe2(k=2),") for line in csv.splitlines())
    m = a.mean_accuracy("moe2", 3.0, 10.0, 2)
    assert m == pytest.approx(np.mean([r.accuracy for r in a.select(method="moe2")]))


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(methods=("oracle",))
    with pytest.raises(ValueError):
        small_config(k_values=(0,))
    with pytest.raises(ValueError):
        small_config(seeds=())
