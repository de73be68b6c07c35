from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moe2.domain import (
    ConstraintSet, History, SubsetMask, VocabDistribution, Workload, as_mask, fleet_from_dict,
    fleet_to_dict, keyed_rng, seeded_rng, substreams, tie_break_key,
)

from conftest import make_expert, make_prompt


def test_seeded_rng_is_reproducible():
    a = seeded_rng(7).standard_normal(5)
    b = seeded_rng(7).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, seeded_rng(8).standard_normal(5))


def test_substreams_are_distinct_and_stable():
    x = [g.random() for g in substreams(3, 4)]
    y = [g.random() for g in substreams(3, 4)]
    assert x == y
    assert len(set(x)) == 4


def test_keyed_rng_depends_on_every_counter_word():
    base = keyed_rng(1, 2, 3, 4).random()
    assert keyed_rng(1, 2, 3, 4).random() == base
    for other in [(9, 2, 3, 4), (1, 9, 3, 4), (1, 2, 9, 4), (1, 2, 3, 9)]:
        assert keyed_rng(*other).random() != base
    with pytest.raises(ValueError):
        keyed_rng(1, 2, 3, 4, 5)


@given(st.integers(min_value=1, max_value=12), st.data())
def test_mask_round_trips(n, data):
    members = data.draw(st.sets(st.integers(0, n - 1)))
    m = SubsetMask.from_members(members, n)
    assert set(m.members()) == members
    assert m.popcount == len(members)
    assert SubsetMask.from_array(m.as_array()) == m
    assert as_mask(m.bits, n) == m
    assert as_mask(sorted(members), n) == m
    assert m.issubset(SubsetMask.full(n))
    assert m.bitstring().count("1") == len(members)


def test_mask_validation():
    with pytest.raises(ValueError):
        SubsetMask(0b100, 2)
    with pytest.raises(ValueError):
        SubsetMask.from_members([3], 3)
    with pytest.raises(ValueError):
        SubsetMask(0, 3).require_nonempty()
    with pytest.raises(ValueError):
        as_mask(np.array([True, False]), 3)


def test_bitstring_lists_expert_zero_first():
    assert SubsetMask.from_members([0, 2], 4).bitstring() == "1010"
    assert str(SubsetMask.from_members([0, 2], 4)) == "{0,2}"


def test_tie_break_prefers_fewer_then_smaller():
    assert sorted([0b110, 0b001, 0b011, 0b100], key=tie_break_key) == [0b001, 0b100, 0b011, 0b110]


def test_constraints_validate_and_round_trip():
    c = ConstraintSet((1.0, float("inf")), 10.0)
    assert ConstraintSet.from_dict(c.to_dict()) == c
    assert ConstraintSet.uniform(2, 5, 3).tau_max == (2.0, 2.0, 2.0)
    assert ConstraintSet.unconstrained(2).e_max == float("inf")
    for bad in [((0.0,), 1.0), ((1.0,), -1.0), ((), 1.0)]:
        with pytest.raises(ValueError):
            ConstraintSet(*bad)


def test_vocab_distribution_checks_simplex():
    d = VocabDistribution(np.array([0.2, 0.5, 0.3]))
    assert d.argmax() == 1 and d.vocab_size == 3 and d[2] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        d.probs[0] = 1.0
    for bad in ([0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0]):
        with pytest.raises(ValueError):
            VocabDistribution(np.array(bad))


def test_argmax_breaks_ties_toward_lower_token():
    assert VocabDistribution(np.array([0.1, 0.45, 0.45])).argmax() == 1


def test_history_steps():
    h = History(0, 10)
    assert h.step == 1 and h.context_length_tokens == 10
    h = h.extend(4).extend(5)
    assert h.generated == (4, 5) and h.step == 3 and h.context_length_tokens == 12


def test_expert_validation():
    with pytest.raises(ValueError):
        make_expert(competence=(1.2,))
    with pytest.raises(ValueError):
        make_expert(data_rate=0.0)
    with pytest.raises(ValueError):
        make_expert(overhead_seconds=-1.0)
    with pytest.raises(ValueError):
        make_expert(shared_noise_weight=2.0)


def test_prompt_validation():
    with pytest.raises(ValueError):
        make_prompt(answer=())
    with pytest.raises(ValueError):
        make_prompt(length=0)
    with pytest.raises(ValueError):
        make_prompt(answer=(1, -2))


def test_json_round_trips():
    fleet = [make_expert(id=i, competence=(0.1 * i, 0.5), home_cluster=i) for i in range(3)]
    back = fleet_from_dict(json.loads(json.dumps(fleet_to_dict(fleet))))
    for a, b in zip(fleet, back):
        assert a.to_dict() == b.to_dict()
    wl = Workload(tuple(make_prompt(id=i, app_class=i % 2, embedding=[i, 0, 1]) for i in range(4)), 8, 2)
    wl2 = Workload.from_dict(json.loads(json.dumps(wl.to_dict())))
    np.testing.assert_array_equal(wl2.embeddings(), wl.embeddings())
    np.testing.assert_array_equal(wl2.app_classes(), [0, 1, 0, 1])
    assert [p.answer for p in wl2] == [p.answer for p in wl]


def test_arrays_are_read_only():
    e = make_expert()
    with pytest.raises(ValueError):
        e.competence[0] = 0.0
