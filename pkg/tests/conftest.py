from __future__ import annotations

import numpy as np
import pytest

from moe2.domain import ExpertProfile, Prompt, Workload

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def make_expert(id=0, competence=(0.9,), sharpness=8.0, **overrides) -> ExpertProfile:
    params = dict(
        id=id, competence=np.asarray(competence, dtype=float), sharpness=sharpness,
        flops_per_token=1e9, compute_capability=1e12, mem_access_size=1e8, mem_bandwidth=1e10,
        overhead_seconds=0.005, data_rate=1e8, energy_base=0.1, energy_per_context_token=0.001,
    )
    params.update(overrides)
    return ExpertProfile(**params)


def make_prompt(id=0, answer=(1, 2), cluster=0, app_class=0, length=100, dim=3, embedding=None) -> Prompt:
    emb = np.zeros(dim) if embedding is None else np.asarray(embedding, dtype=float)
    return Prompt(id=id, embedding=emb, app_class=app_class, cluster_label=cluster,
                  prompt_length_tokens=length, data_size_bytes=4.0 * length, answer=tuple(answer))


def random_cost_expert(rng: np.random.Generator, id: int, K: int = 1) -> ExpertProfile:
    return make_expert(
        id=id, competence=rng.uniform(0, 1, K),
        flops_per_token=rng.uniform(1e8, 1e10), compute_capability=rng.uniform(1e11, 1e13),
        mem_access_size=rng.uniform(0, 1e9), mem_bandwidth=rng.uniform(1e9, 1e12),
        overhead_seconds=rng.uniform(0, 0.1), data_rate=rng.uniform(1e5, 1e8),
        energy_base=rng.uniform(0, 2), energy_per_context_token=rng.uniform(0, 0.01),
    )


def random_workload(rng: np.random.Generator, n: int, n_classes: int = 2, dim: int = 3,
                    vocab: int = 16, t_max: int = 3) -> Workload:
    prompts = []
    for i in range(n):
        T = int(rng.integers(1, t_max + 1))
        prompts.append(make_prompt(
            id=i, answer=tuple(int(x) for x in rng.integers(0, vocab, T)), cluster=0,
            app_class=i % n_classes, length=int(rng.integers(1, 500)), dim=dim,
            embedding=rng.standard_normal(dim)))
    return Workload(tuple(prompts), vocab, n_classes)
