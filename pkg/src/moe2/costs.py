"""Delay and energy model, and the feasibility predicate used by subset selection.

Per expert n and answer step t (context length L = prompt length + t - 1)::

    compute   = flops_per_token * L / compute_capability
                + mem_access_size / mem_bandwidth + overhead_seconds
    uplink    = D(x) / data_rate at t = 1, payload / data_rate afterwards
    downlink  = payload / data_rate
    energy    = energy_base + energy_per_context_token * L

A subset waits for its slowest member on every step and pays the energy of
all members. Prompt-level costs average over the answer's T steps; the
gating delay is added once to the prompt delay.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import ConstraintSet, ExpertProfile, Prompt, Workload, as_mask

DEFAULT_PAYLOAD_BYTES = 4.0


def _members(S, fleet) -> list[int]:
    mask = as_mask(S, len(fleet))
    if mask.bits == 0:
        raise ValueError("expert subset must be nonempty")
    return mask.members()


def compute_delay(expert: ExpertProfile, context_length_tokens: int) -> float:
    if context_length_tokens < 1:
        raise ValueError("context length must be >= 1")
    return (expert.flops_per_token * context_length_tokens / expert.compute_capability
            + expert.mem_access_size / expert.mem_bandwidth
            + expert.overhead_seconds)


def transmission_delay(expert: ExpertProfile, data_size_bytes: float) -> float:
    if data_size_bytes < 0:
        raise ValueError("data size must be >= 0")
    return data_size_bytes / expert.data_rate


def per_token_delay(expert: ExpertProfile, prompt: Prompt, t: int,
                    payload_bytes: float = DEFAULT_PAYLOAD_BYTES) -> float:
    """Delay of step ``t`` (1-based). Step 1 uploads the whole prompt."""
    if t < 1:
        raise ValueError("t must be >= 1")
    context = prompt.prompt_length_tokens + t - 1
    uplink = prompt.data_size_bytes if t == 1 else payload_bytes
    return (compute_delay(expert, context)
            + transmission_delay(expert, uplink)
            + transmission_delay(expert, payload_bytes))


def ensemble_token_delay(prompt: Prompt, S, t: int, fleet: Sequence[ExpertProfile],
                         payload_bytes: float = DEFAULT_PAYLOAD_BYTES) -> float:
    return max(per_token_delay(fleet[n], prompt, t, payload_bytes) for n in _members(S, fleet))


def mean_prompt_delay(prompt: Prompt, S, fleet: Sequence[ExpertProfile], gate_delay: float = 0.0,
                      n_tokens: int | None = None,
                      payload_bytes: float = DEFAULT_PAYLOAD_BYTES) -> float:
    """Mean per-step ensemble delay over ``n_tokens`` steps (default: answer length) plus gating."""
    T = prompt.answer_length if n_tokens is None else n_tokens
    if T < 1:
        raise ValueError("need at least one token")
    total = 0.0
    for t in range(1, T + 1):
        total += ensemble_token_delay(prompt, S, t, fleet, payload_bytes)
    return total / T + gate_delay


def expert_token_energy(expert: ExpertProfile, context_length_tokens: int) -> float:
    return expert.energy_base + expert.energy_per_context_token * context_length_tokens


def token_energy(prompt: Prompt, S, t: int, fleet: Sequence[ExpertProfile]) -> float:
    context = prompt.prompt_length_tokens + t - 1
    return sum(expert_token_energy(fleet[n], context) for n in _members(S, fleet))


def mean_prompt_energy(prompt: Prompt, S, fleet: Sequence[ExpertProfile],
                       n_tokens: int | None = None) -> float:
    T = prompt.answer_length if n_tokens is None else n_tokens
    if T < 1:
        raise ValueError("need at least one token")
    total = 0.0
    for t in range(1, T + 1):
        total += token_energy(prompt, S, t, fleet)
    return total / T


@dataclass(frozen=True)
class CostBreakdown:
    """Costs of answering one prompt with a given expert set."""

    expert_delays: np.ndarray     # (T, |S|) per-member step delays
    members: tuple[int, ...]
    token_delays: np.ndarray      # (T,) max over members
    token_energies: np.ndarray    # (T,) sum over members
    gate_delay: float

    @property
    def mean_delay(self) -> float:
        return float(self.token_delays.mean() + self.gate_delay)

    @property
    def mean_energy(self) -> float:
        return float(self.token_energies.mean())

    def to_dict(self) -> dict:
        return {"members": list(self.members), "mean_delay": self.mean_delay,
                "mean_energy": self.mean_energy, "gate_delay": self.gate_delay,
                "token_delays": self.token_delays.tolist(),
                "token_energies": self.token_energies.tolist()}


def cost_breakdown(prompt: Prompt, S, fleet: Sequence[ExpertProfile], gate_delay: float = 0.0,
                   n_tokens: int | None = None,
                   payload_bytes: float = DEFAULT_PAYLOAD_BYTES) -> CostBreakdown:
    members = _members(S, fleet)
    T = prompt.answer_length if n_tokens is None else n_tokens
    per = np.array([[per_token_delay(fleet[n], prompt, t, payload_bytes) for n in members]
                    for t in range(1, T + 1)])
    energies = np.array([token_energy(prompt, members, t, fleet) for t in range(1, T + 1)])
    return CostBreakdown(per, tuple(members), per.max(axis=1), energies, gate_delay)


# --------------------------------------------------------------------------
# workload-level costs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpectedCosts:
    delay_by_class: np.ndarray
    energy: float


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    delay_by_class: np.ndarray
    energy: float
    delay_slack: np.ndarray
    energy_slack: float

    @property
    def binding(self) -> str:
        """Name of the tightest (smallest-slack) constraint."""
        slacks = [(float(s), f"tau_max[{m}]") for m, s in enumerate(self.delay_slack)]
        slacks.append((float(self.energy_slack), "e_max"))
        return min(slacks)[1]

    def to_dict(self) -> dict:
        return {"feasible": self.feasible,
                "delay_by_class": self.delay_by_class.tolist(),
                "energy": self.energy,
                "delay_slack": self.delay_slack.tolist(),
                "energy_slack": self.energy_slack,
                "binding": self.binding}


class CostTable:
    """Precomputed per-(prompt, step, expert) delays and energies for one workload.

    Subset queries reduce over the expert axis, so evaluating a mask costs
    O(prompts * steps) regardless of how the mask was reached. Results are
    memoised by bitmask.
    """

    def __init__(self, fleet: Sequence[ExpertProfile], workload: Workload, n_classes: int | None = None,
                 gate_delay: float = 0.0, payload_bytes: float = DEFAULT_PAYLOAD_BYTES):
        if len(workload) == 0:
            raise ValueError("workload is empty")
        self.n_experts = len(fleet)
        self.gate_delay = float(gate_delay)
        self.n_classes = workload.n_classes if n_classes is None else n_classes
        self.classes = workload.app_classes()
        if self.classes.max() >= self.n_classes:
            raise ValueError(f"workload has class {self.classes.max()}, expected {self.n_classes} classes")
        for m in range(self.n_classes):
            if not np.any(self.classes == m):
                raise ValueError(f"application class {m} has no prompts")
        self.lengths = np.array([p.answer_length for p in workload])
        T = int(self.lengths.max())
        steps = np.arange(1, T + 1)
        self.mask = steps[None, :] <= self.lengths[:, None]
        plen = np.array([p.prompt_length_tokens for p in workload], dtype=float)
        dsize = np.array([p.data_size_bytes for p in workload], dtype=float)
        ctx = plen[:, None] + steps[None, :] - 1                         # (P, T)

        def col(name):
            return np.array([getattr(e, name) for e in fleet], dtype=float)[None, None, :]

        compute = (col("flops_per_token") * ctx[:, :, None] / col("compute_capability")
                   + col("mem_access_size") / col("mem_bandwidth") + col("overhead_seconds"))
        uplink = np.where(steps[None, :, None] == 1, dsize[:, None, None], payload_bytes)
        delays = compute + uplink / col("data_rate") + payload_bytes / col("data_rate")
        energies = col("energy_base") + col("energy_per_context_token") * ctx[:, :, None]
        self.delays = np.where(self.mask[:, :, None], delays, 0.0)
        self.energies = np.where(self.mask[:, :, None], energies, 0.0)
        # energy is additive over experts, so keep the per-expert prompt means
        self.expert_mean_energy = self.energies.sum(axis=1) / self.lengths[:, None]
        self._cache: dict[int, ExpectedCosts] = {}

    def _bits(self, S) -> int:
        bits = as_mask(S, self.n_experts).bits
        if bits == 0:
            raise ValueError("expert subset must be nonempty")
        return bits

    def _sel(self, bits: int) -> np.ndarray:
        return np.array([(bits >> n) & 1 for n in range(self.n_experts)], dtype=bool)

    def prompt_delays(self, S) -> np.ndarray:
        sel = self._sel(self._bits(S))
        step = self.delays[:, :, sel].max(axis=2)
        return step.sum(axis=1) / self.lengths + self.gate_delay

    def prompt_energies(self, S) -> np.ndarray:
        sel = self._sel(self._bits(S))
        return self.expert_mean_energy[:, sel].sum(axis=1)

    def routed(self, support: np.ndarray, gate_delay: float | None = None) -> ExpectedCosts:
        """Costs when prompt i queries only the experts flagged in row i of ``support`` (P, N)."""
        support = np.asarray(support, dtype=bool)
        if support.shape != self.expert_mean_energy.shape or not support.any(axis=1).all():
            raise ValueError("support must be (prompts, experts) with a nonempty row per prompt")
        gate = self.gate_delay if gate_delay is None else gate_delay
        step = np.where(support[:, None, :], self.delays, 0.0).max(axis=2)
        d = step.sum(axis=1) / self.lengths + gate
        e = (self.expert_mean_energy * support).sum(axis=1)
        by_class = np.array([d[self.classes == m].mean() for m in range(self.n_classes)])
        return ExpectedCosts(by_class, float(e.mean()))

    def expected(self, S) -> ExpectedCosts:
        bits = self._bits(S)
        hit = self._cache.get(bits)
        if hit is None:
            d = self.prompt_delays(bits)
            e = self.prompt_energies(bits)
            by_class = np.array([d[self.classes == m].mean() for m in range(self.n_classes)])
            hit = ExpectedCosts(by_class, float(e.mean()))
            self._cache[bits] = hit
        return hit

    def report(self, S, constraints: ConstraintSet) -> FeasibilityReport:
        if constraints.n_classes != self.n_classes:
            raise ValueError(f"constraints cover {constraints.n_classes} classes, workload has {self.n_classes}")
        c = self.expected(S)
        tau = np.array(constraints.tau_max)
        feasible = bool(np.all(c.delay_by_class <= tau) and c.energy <= constraints.e_max)
        return FeasibilityReport(feasible, c.delay_by_class, c.energy,
                                 tau - c.delay_by_class, constraints.e_max - c.energy)

    def feasible(self, S, constraints: ConstraintSet) -> bool:
        return self.report(S, constraints).feasible


def expected_costs(workload: Workload, S, fleet: Sequence[ExpertProfile], gate_delay: float = 0.0,
                   payload_bytes: float = DEFAULT_PAYLOAD_BYTES) -> ExpectedCosts:
    """Per-class mean prompt delay and overall mean prompt energy over ``workload``."""
    return CostTable(fleet, workload, gate_delay=gate_delay, payload_bytes=payload_bytes).expected(S)


def is_feasible(S, constraints: ConstraintSet, workload: Workload, fleet: Sequence[ExpertProfile],
                gate_delay: float = 0.0,
                payload_bytes: float = DEFAULT_PAYLOAD_BYTES) -> FeasibilityReport:
    table = CostTable(fleet, workload, n_classes=constraints.n_classes,
                      gate_delay=gate_delay, payload_bytes=payload_bytes)
    return table.report(S, constraints)
