"""Coarse-grained expert-subset selection.

Subset monotonic optimisation searches the Boolean lattice of expert
subsets with a polyblock-style vertex set: every feasible subset that could
still beat the incumbent lies below some vertex. Each round takes the best
vertex; if it is feasible it is optimal (given a monotone objective),
otherwise it is projected onto the feasible region along a removal chain,
the projection updates the incumbent, and the vertex is replaced by the
children that still cover every feasible subset beneath it.

Objectives are maximised; they are the negated empirical loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .costs import CostTable, FeasibilityReport
from .domain import ConstraintSet, SubsetMask, as_mask, tie_break_key
from .gating import GatingDataset, GatingParams, prompt_losses, tabular_optimal_loss

EXHAUSTIVE_LIMIT = 20
DEFAULT_DECIMALS = 10


class InfeasibleProblem(Exception):
    """No nonempty subset satisfies the constraints."""

    def __init__(self, message: str, report: FeasibilityReport | None = None):
        super().__init__(message)
        self.report = report

    @property
    def binding(self) -> str | None:
        return None if self.report is None else self.report.binding


class InfeasibleProjection(Exception):
    """The removal chain from a subset never reaches a feasible set."""


class IterationLimit(Exception):
    def __init__(self, message: str, incumbent: SubsetMask | None, objective: float, trace: "SmoTrace"):
        super().__init__(message)
        self.incumbent = incumbent
        self.objective = objective
        self.trace = trace


# --------------------------------------------------------------------------
# objective and feasibility oracles
# --------------------------------------------------------------------------

class SubsetObjective:
    """Memoised set function, keyed by bitmask.

    Values are rounded to ``decimals`` places so that subsets whose exact
    objectives tie compare equal despite solver round-off.
    """

    def __init__(self, fn: Callable[[SubsetMask], float], n_experts: int,
                 decimals: int | None = DEFAULT_DECIMALS, name: str = "objective"):
        self.fn = fn
        self.n_experts = n_experts
        self.decimals = decimals
        self.name = name
        self._memo: dict[int, float] = {}
        self.evaluations = 0

    def __call__(self, S) -> float:
        mask = as_mask(S, self.n_experts).require_nonempty()
        hit = self._memo.get(mask.bits)
        if hit is None:
            self.evaluations += 1
            hit = float(self.fn(mask))
            if self.decimals is not None:
                hit = round(hit, self.decimals) + 0.0
            self._memo[mask.bits] = hit
        return hit


def restricted_objective(theta: GatingParams, data: GatingDataset,
                         decimals: int | None = DEFAULT_DECIMALS) -> SubsetObjective:
    """Negated empirical loss of the trained gate restricted and renormalised to each subset."""
    return SubsetObjective(lambda S: -prompt_losses(theta, S, data).mean(),
                           data.n_experts, decimals, "restricted")


def tabular_objective(data: GatingDataset, decimals: int | None = DEFAULT_DECIMALS) -> SubsetObjective:
    """Negated infinite-capacity optimum: per-prompt optimal weights on each subset.

    This set function is monotone nondecreasing, which is what makes the
    lattice search exact.
    """
    targets = [data.prompt_targets(i) for i in range(len(data))]
    return SubsetObjective(lambda S: -float(np.mean([tabular_optimal_loss(P, S) for P in targets])),
                           data.n_experts, decimals, "tabular")


class Feasibility:
    """Constraint check against a cost table; downward closed by construction of the cost model."""

    def __init__(self, table: CostTable, constraints: ConstraintSet):
        self.table = table
        self.constraints = constraints
        self.n_experts = table.n_experts
        self._memo: dict[int, bool] = {}

    def __call__(self, S) -> bool:
        bits = as_mask(S, self.n_experts).bits
        hit = self._memo.get(bits)
        if hit is None:
            hit = self.table.feasible(bits, self.constraints)
            self._memo[bits] = hit
        return hit

    def report(self, S) -> FeasibilityReport:
        return self.table.report(S, self.constraints)


def _least_violating_singleton(feasible, n: int) -> FeasibilityReport | None:
    if not hasattr(feasible, "report"):
        return None
    reports = [feasible.report(1 << i) for i in range(n)]
    return max(reports, key=lambda r: min(float(r.delay_slack.min()), r.energy_slack))


def _check_some_feasible(feasible, n: int) -> None:
    if not any(feasible(1 << i) for i in range(n)):
        rep = _least_violating_singleton(feasible, n)
        where = f"; binding constraint {rep.binding}" if rep is not None else ""
        raise InfeasibleProblem(f"no nonempty subset of {n} experts is feasible{where}", rep)


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def _better(a: tuple[float, int], b: tuple[float, int] | None) -> bool:
    """Objective-then-tie-break comparison of (value, bits) pairs."""
    if b is None:
        return True
    if a[0] != b[0]:
        return a[0] > b[0]
    return tie_break_key(a[1]) < tie_break_key(b[1])


def removal_chain(S, feasible, objective, n: int) -> list[int]:
    """Descending chain S = c_0 > c_1 > ... ending at the first feasible set or a singleton.

    Each step drops the member whose removal costs the least objective
    (lower id on ties).
    """
    cur = as_mask(S, n).require_nonempty().bits
    chain = [cur]
    while not feasible(cur) and cur & (cur - 1):
        f_cur = objective(cur)
        members = [i for i in range(n) if cur >> i & 1]
        drop = min(members, key=lambda i: (f_cur - objective(cur & ~(1 << i)), i))
        cur &= ~(1 << drop)
        chain.append(cur)
    return chain


def projection_pi_G(S, feasible, objective, n: int | None = None) -> SubsetMask:
    """Greatest feasible set on the removal chain below ``S``.

    When the chain bottoms out at an infeasible singleton, the best feasible
    singleton of ``S`` is returned instead; InfeasibleProjection if none exists.
    """
    n = n if n is not None else objective.n_experts
    return _project(S, feasible, objective, n)[0]


def _project(S, feasible, objective, n: int) -> tuple[SubsetMask, list[int]]:
    chain = removal_chain(S, feasible, objective, n)
    end = chain[-1]
    if feasible(end):
        return SubsetMask(end, n), chain
    bits = as_mask(S, n).bits
    best = None
    for i in range(n):
        if bits >> i & 1 and feasible(1 << i):
            cand = (objective(1 << i), 1 << i)
            if _better(cand, best):
                best = cand
    if best is None:
        raise InfeasibleProjection(f"no nonempty subset of {SubsetMask(bits, n)} is feasible")
    return SubsetMask(best[1], n), chain


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoConfig:
    epsilon: float = 0.0
    max_iterations: int = 10_000
    vertex_rule: str = "chain"   # "chain" (sound) or "coordinate" (literal per-coordinate rule)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.vertex_rule not in ("chain", "coordinate"):
            raise ValueError(f"unknown vertex rule {self.vertex_rule!r}")


@dataclass(frozen=True)
class SmoRecord:
    iteration: int
    n_vertices: int
    chosen: int
    chosen_objective: float
    projection: int | None
    cbv: float
    action: str

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "n_vertices": self.n_vertices, "chosen": self.chosen,
                "chosen_objective": self.chosen_objective, "projection": self.projection,
                "cbv": self.cbv if np.isfinite(self.cbv) else None, "action": self.action}


@dataclass
class SmoTrace:
    n_experts: int
    records: list[SmoRecord] = field(default_factory=list)
    evaluations: int = 0

    def cbv_history(self) -> list[float]:
        return [r.cbv for r in self.records]

    def to_dict(self) -> dict:
        return {"n_experts": self.n_experts, "evaluations": self.evaluations,
                "records": [r.to_dict() for r in self.records]}


@dataclass
class SmoResult:
    mask: SubsetMask
    objective: float
    trace: SmoTrace
    status: str          # "optimal" (feasible vertex reached) or "epsilon-optimal" (vertex set exhausted)


def _remove_dominated(vertices: set[int]) -> set[int]:
    return {v for v in vertices if not any(u != v and v & u == v for u in vertices)}


def smo_select(objective: SubsetObjective, feasible, n_experts: int | None = None,
               config: SmoConfig = SmoConfig()) -> SmoResult:
    """Best feasible subset under a monotone objective and a downward-closed feasible set."""
    n = n_experts if n_experts is not None else objective.n_experts
    _check_some_feasible(feasible, n)
    trace = SmoTrace(n)
    start_evals = objective.evaluations
    vertices = {(1 << n) - 1}
    cbv, incumbent = -np.inf, None
    eps = config.epsilon

    def finish(bits, value, status):
        trace.evaluations = objective.evaluations - start_evals
        return SmoResult(SubsetMask(bits, n), value, trace, status)

    for k in range(1, config.max_iterations + 1):
        vertices = {v for v in vertices if objective(v) > cbv + eps}
        if not vertices:
            # every remaining candidate is within eps of the incumbent
            return finish(incumbent, cbv, "epsilon-optimal")
        v = min(vertices, key=lambda b: (-objective(b), *tie_break_key(b)))
        fv = objective(v)
        if feasible(v):
            trace.records.append(SmoRecord(k, len(vertices), v, fv, v, fv, "feasible-vertex"))
            return finish(v, fv, "optimal")
        try:
            proj, chain = _project(v, feasible, objective, n)
        except InfeasibleProjection:
            # nothing feasible lies below v
            vertices.discard(v)
            trace.records.append(SmoRecord(k, len(vertices), v, fv, None, cbv, "discard"))
            continue
        fp = objective(proj.bits)
        if _better((fp, proj.bits), None if incumbent is None else (cbv, incumbent)):
            cbv, incumbent = fp, proj.bits
        if config.vertex_rule == "chain":
            # any feasible subset of v misses at least one member of the last infeasible chain set
            pivot = chain[-2] if feasible(chain[-1]) else chain[-1]
        else:
            pivot = v & ~proj.bits
        children = {v & ~(1 << i) for i in range(n) if pivot >> i & 1}
        children.discard(0)
        vertices.discard(v)
        vertices = _remove_dominated(vertices | children)
        trace.records.append(SmoRecord(k, len(vertices), v, fv, proj.bits, cbv, "project"))
    trace.evaluations = objective.evaluations - start_evals
    raise IterationLimit(f"no termination within {config.max_iterations} iterations",
                         None if incumbent is None else SubsetMask(incumbent, n), cbv, trace)


def exhaustive_select(objective: SubsetObjective, feasible, n_experts: int | None = None) -> SmoResult:
    """Brute force over all nonempty subsets (N <= 20); ties go to smaller popcount, then smaller mask."""
    n = n_experts if n_experts is not None else objective.n_experts
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search is limited to {EXHAUSTIVE_LIMIT} experts, got {n}")
    _check_some_feasible(feasible, n)
    best = None
    for bits in range(1, 1 << n):
        if feasible(bits):
            cand = (objective(bits), bits)
            if _better(cand, best):
                best = cand
    return SmoResult(SubsetMask(best[1], n), best[0], SmoTrace(n), "optimal")


def select_subset(theta: GatingParams | None, objective_data: GatingDataset, table: CostTable,
                  constraints: ConstraintSet, config: SmoConfig = SmoConfig(),
                  objective: str = "restricted") -> SmoResult:
    """Build the objective and feasibility oracles and run the lattice search."""
    if objective == "restricted":
        if theta is None:
            raise ValueError("restricted objective needs trained gating parameters")
        f = restricted_objective(theta, objective_data)
    elif objective == "tabular":
        f = tabular_objective(objective_data)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return smo_select(f, Feasibility(table, constraints), table.n_experts, config)
