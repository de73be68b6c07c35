from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from moe2.domain import seeded_rng
from moe2.synth import (
    FAST_TIER, FleetSpec, HardwareTier, WorkloadSpec, blend, expert_next_token_dist, expert_outputs, generalist_expert,
    generate_fleet, generate_workload, home_cluster_assignment, keyed_noise, kmeans_cluster,
    split_indices, train_test_split,
)

from conftest import make_expert, make_prompt


def small_spec(**kw):
    base = dict(n_prompts=200, embedding_dim=4, n_clusters=4, vocab_size=16)
    base.update(kw)
    return WorkloadSpec(**base)


def test_single_cluster_workload():
    wl = generate_workload(small_spec(n_clusters=1), seeded_rng(0))
    assert set(wl.cluster_labels()) == {0}
    assert len(wl) == 200


def test_points_sit_near_their_center():
    centers = np.array([[0.0, 0.0], [100.0, 0.0]])
    spec = small_spec(n_prompts=500, embedding_dim=2, n_clusters=2, cluster_centers=centers)
    wl = generate_workload(spec, seeded_rng(1))
    X, y = wl.embeddings(), wl.cluster_labels()
    dist = np.linalg.norm(X - centers[y], axis=1)
    # chi with 2 dof: P(r > 3.5) ~ 0.2%
    assert np.mean(dist < 3.5) > 0.99


def test_cluster_counts_match_weights():
    spec = small_spec(n_prompts=4000, cluster_weights=(0.4, 0.3, 0.2, 0.1))
    counts = np.bincount(generate_workload(spec, seeded_rng(2)).cluster_labels(), minlength=4)
    expected = 4000 * np.array([0.4, 0.3, 0.2, 0.1])
    sd = np.sqrt(expected * (1 - expected / 4000))
    assert np.all(np.abs(counts - expected) < 3 * sd)


def test_workload_fields():
    spec = small_spec(answer_length_range=(2, 3), n_classes=2)
    wl = generate_workload(spec, seeded_rng(3))
    for p in wl:
        assert 2 <= p.answer_length <= 3
        assert p.app_class == p.cluster_label % 2
        assert 8 <= p.prompt_length_tokens <= 2048
        assert p.data_size_bytes == 4.0 * p.prompt_length_tokens
        assert max(p.answer) < 16
    # prompts in one cluster share the answer prefix
    by_cluster = {}
    for p in wl:
        by_cluster.setdefault(p.cluster_label, p.answer)
        assert p.answer[:2] == by_cluster[p.cluster_label][:2]


def test_workload_is_deterministic():
    a = generate_workload(small_spec(), seeded_rng(5))
    b = generate_workload(small_spec(), seeded_rng(5))
    np.testing.assert_array_equal(a.embeddings(), b.embeddings())
    assert [p.answer for p in a] == [p.answer for p in b]


def test_invalid_workload_spec():
    for kw in [dict(n_prompts=0), dict(answer_length_range=(3, 2)), dict(cluster_weights=(1, 1)),
               dict(vocab_size=1), dict(cluster_centers=np.zeros((2, 2)))]:
        with pytest.raises(ValueError):
            generate_workload(small_spec(**kw), seeded_rng(0))


def test_split_is_a_partition():
    train, test = split_indices(50, 0.2, seeded_rng(0))
    assert len(test) == 10 and len(train) == 40
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(50))
    wl = generate_workload(small_spec(n_prompts=50), seeded_rng(0))
    tr, te = train_test_split(wl, 0.2, seeded_rng(0))
    assert {p.id for p in tr} | {p.id for p in te} == set(range(50))


def test_kmeans_single_cluster_is_the_mean():
    X = seeded_rng(0).standard_normal((30, 3))
    res = kmeans_cluster(X, 1, seeded_rng(0))
    np.testing.assert_allclose(res.centers[0], X.mean(axis=0))
    assert set(res.labels) == {0}


def test_kmeans_k_equals_n_is_zero_cost():
    X = seeded_rng(0).standard_normal((6, 2))
    assert kmeans_cluster(X, 6, seeded_rng(1)).wcss == pytest.approx(0.0, abs=1e-12)


def test_kmeans_recovers_separated_clusters():
    centers = np.array([[0, 0], [50, 0], [0, 50]], dtype=float)
    spec = small_spec(n_prompts=300, embedding_dim=2, n_clusters=3, cluster_centers=centers)
    wl = generate_workload(spec, seeded_rng(4))
    res = kmeans_cluster(wl.embeddings(), 3, seeded_rng(4))
    truth = wl.cluster_labels()
    # perfect agreement up to relabelling
    pairs = set(zip(res.labels.tolist(), truth.tolist()))
    assert len(pairs) == 3


def test_kmeans_cost_never_increases():
    X = seeded_rng(3).standard_normal((200, 4))
    hist = kmeans_cluster(X, 5, seeded_rng(3)).wcss_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_rejects_bad_k():
    with pytest.raises(ValueError):
        kmeans_cluster(np.zeros((3, 2)), 4, seeded_rng(0))


def test_home_assignment_is_a_bijection_when_n_equals_k():
    assert home_cluster_assignment(8, 8) == list(range(8))
    assert home_cluster_assignment(5, 2, labels=[1, 1, 1, 0]) == [1, 0, 1, 0, 1]


def test_fleet_shape_and_tiers():
    fleet = generate_fleet(FleetSpec(), labels=None, rng=seeded_rng(0))
    assert len(fleet) == 8
    assert sorted(e.home_cluster for e in fleet) == list(range(8))
    for e in fleet:
        assert e.competence[e.home_cluster] == 0.9
        off = np.delete(e.competence, e.home_cluster)
        assert np.all(off < 0.9)
    speed = sorted(e.compute_capability for e in fleet)
    # three fast experts dominate the five slow ones
    assert speed[4] < speed[5]
    fast = [e for e in fleet if e.compute_capability >= speed[5]]
    slow = [e for e in fleet if e.compute_capability < speed[5]]
    assert len(fast) == 3
    assert min(e.energy_base for e in fast) > max(e.energy_base for e in slow)


def test_fleet_validation():
    with pytest.raises(ValueError):
        generate_fleet(FleetSpec(n_experts=3), None, seeded_rng(0))


def test_generalist_uses_fleet_medians():
    fleet = generate_fleet(FleetSpec(), None, seeded_rng(0))
    g = generalist_expert(fleet, competence=0.15)
    assert g.id == 8 and np.all(g.competence == 0.15)
    assert g.overhead_seconds == pytest.approx(np.median([e.overhead_seconds for e in fleet]))


def test_confident_expert_puts_mass_on_target():
    e = make_expert(competence=(1.0,), sharpness=50.0)
    p = make_prompt(answer=(3, 7))
    for t in (1, 2):
        d = expert_next_token_dist(e, p, t, vocab_size=16)
        assert d[p.answer[t - 1]] > 0.99


def test_zero_competence_is_pure_noise():
    e = make_expert(competence=(0.0,), noise_seed=11)
    p = make_prompt(answer=(3,))
    d = expert_next_token_dist(e, p, 1, vocab_size=16)
    np.testing.assert_allclose(d.probs, keyed_noise(e, p.id, 1, 16))


def test_blend_is_a_distribution():
    rng = seeded_rng(0)
    for _ in range(50):
        noise = rng.dirichlet(np.ones(10))
        e = make_expert(competence=(rng.random(),), sharpness=rng.uniform(0.1, 30))
        q = blend(e, 0, int(rng.integers(10)), noise)
        assert np.all(q >= 0) and q.sum() == pytest.approx(1.0)


def test_higher_competence_means_more_target_mass():
    prompts = [make_prompt(id=i, answer=(i % 16,)) for i in range(300)]
    lo = make_expert(id=0, competence=(0.3,), noise_seed=1)
    hi = make_expert(id=1, competence=(0.6,), noise_seed=2)
    a = [expert_next_token_dist(lo, p, 1, 16)[p.answer[0]] for p in prompts]
    b = [expert_next_token_dist(hi, p, 1, 16)[p.answer[0]] for p in prompts]
    t = stats.ttest_ind(b, a, alternative="greater")
    assert t.pvalue < 1e-6


def test_distributions_are_deterministic_and_history_free():
    e = make_expert(noise_seed=5)
    p = make_prompt(answer=(1, 2, 3))
    a = expert_next_token_dist(e, p, 2, 16).probs
    b = expert_next_token_dist(e, p, 2, 16).probs
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, expert_next_token_dist(e, p, 3, 16).probs)


def test_step_out_of_range():
    with pytest.raises(ValueError):
        expert_next_token_dist(make_expert(), make_prompt(answer=(1,)), 2, 16)


def test_expert_outputs_match_single_calls():
    wl = generate_workload(small_spec(n_prompts=20), seeded_rng(0))
    spec = FleetSpec(n_experts=4, k_clusters=4, hardware_tiers=(HardwareTier("one", 4, FAST_TIER.ranges),))
    fleet = generate_fleet(spec, wl.cluster_labels(), seeded_rng(1))
    out = expert_outputs(fleet, wl)
    for i in (0, 7, 19):
        p = wl[i]
        for n in range(4):
            for t in range(1, p.answer_length + 1):
                np.testing.assert_allclose(out.dists[i, t - 1, n], expert_next_token_dist(fleet[n], p, t, 16).probs)
                assert out.target[i, t - 1, n] == pytest.approx(out.dists[i, t - 1, n, p.answer[t - 1]])
    assert np.all(out.target[~out.mask] == 1.0)
