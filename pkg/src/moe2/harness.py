"""End-to-end experiments: baselines, constraint sweeps and result tables.

One replicate builds a workload and fleet from its seed, trains the gate on
the training split, and evaluates every method on the held-out split for
each (tau_max, E_max) cell. Subset selection uses the training split for
its objective and the held-out split for feasibility, so emitted masks are
feasible on the workload they are evaluated on.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .costs import CostTable
from .domain import ConstraintSet, as_mask, ExpertProfile, SubsetMask, Workload, seeded_rng, substreams
from .gating import GatingDataset, GatingParams, TrainConfig, TrainResult, train_gating
from .inference import batch_accuracy, routing_weights
from .smo import Feasibility, InfeasibleProblem, SmoConfig, restricted_objective, smo_select, tabular_objective
from .synth import (
    ExpertOutputs,
    FleetSpec,
    WorkloadSpec,
    expert_outputs,
    generalist_expert,
    generate_fleet,
    generate_workload,
    kmeans_cluster,
    split_indices,
)

log = logging.getLogger(__name__)

METHODS = ("moe2", "smo_mv", "rand_mv", "single_agent", "majority_vote_full", "average_expert_accuracy")
CONSTRAINED = ("moe2", "smo_mv", "rand_mv")
DEFAULT_TAUS = (1.0, 2.0, 3.0)
DEFAULT_ENERGIES = (5.0, 10.0, 15.0, 20.0, 25.0, 35.0, 50.0)


@dataclass(frozen=True)
class ExperimentConfig:
    workload: WorkloadSpec = WorkloadSpec()
    fleet: FleetSpec = FleetSpec()
    train: TrainConfig = TrainConfig()
    smo: SmoConfig = SmoConfig()
    tau_grid: tuple[float, ...] = DEFAULT_TAUS
    energy_grid: tuple[float, ...] = DEFAULT_ENERGIES
    k_values: tuple[int | None, ...] = (2,)
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0,)
    test_fraction: float = 0.2
    gate_delay: float = 0.002
    objective: str = "restricted"
    rand_max_draws: int = 10_000
    generalist_competence: float = 0.15

    def __post_init__(self):
        if not self.tau_grid or not self.energy_grid or not self.methods or not self.seeds:
            raise ValueError("grid, methods and seeds must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not self.k_values or any(k is not None and k < 1 for k in self.k_values):
            raise ValueError("k values must be positive (or None for the whole subset)")
        if self.objective not in ("restricted", "tabular"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def cells(self) -> list[tuple[float, float]]:
        return [(t, e) for t in self.tau_grid for e in self.energy_grid]


# --------------------------------------------------------------------------
# one replicate's world
# --------------------------------------------------------------------------

@dataclass
class Scenario:
    seed: int
    workload: Workload
    fleet: list[ExpertProfile]
    outputs: ExpertOutputs
    train_idx: np.ndarray
    test_idx: np.ndarray
    train_data: GatingDataset
    test_workload: Workload
    test_outputs: ExpertOutputs
    costs: CostTable
    training: TrainResult | None = None

    @property
    def theta(self) -> GatingParams:
        return self.training.params


def build_scenario(config: ExperimentConfig, seed: int, train: bool = True) -> Scenario:
    r_workload, r_cluster, r_fleet, r_split = substreams(seed, 4)
    workload = generate_workload(config.workload, r_workload)
    labels = kmeans_cluster(workload.embeddings(), config.fleet.k_clusters, r_cluster).labels
    fleet = generate_fleet(config.fleet, labels, r_fleet)
    outputs = expert_outputs(fleet, workload)
    train_idx, test_idx = split_indices(len(workload), config.test_fraction, r_split)
    if test_idx.size == 0:
        test_idx = train_idx
    train_data = GatingDataset(workload.embeddings()[train_idx], outputs.target[train_idx],
                               outputs.mask[train_idx])
    test_workload = workload.subset(test_idx.tolist())
    scen = Scenario(seed, workload, fleet, outputs, train_idx, test_idx, train_data, test_workload,
                    outputs.subset(test_idx), CostTable(fleet, test_workload, gate_delay=config.gate_delay))
    if train:
        scen.training = train_gating(train_data, replace_seed(config.train, seed))
    return scen


def replace_seed(train: TrainConfig, seed: int) -> TrainConfig:
    return replace(train, seed=int(np.random.SeedSequence([seed, train.seed]).generate_state(1)[0]))


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodOutcome:
    accuracy: float
    mask: SubsetMask | None
    delay_by_class: tuple[float, ...] | None   # None when the method has no cost of its own
    energy: float | None
    draws: int = 0


def _outcome(scen: Scenario, W: np.ndarray, mask: SubsetMask | None, draws: int = 0,
             gated: bool = False) -> MethodOutcome:
    support = W > 0
    costs = scen.costs.routed(support, None if gated else 0.0)
    return MethodOutcome(batch_accuracy(scen.test_outputs, W), mask,
                         tuple(float(x) for x in costs.delay_by_class), costs.energy, draws)


def run_baseline_majority_vote(S, scen: Scenario) -> MethodOutcome:
    """Uniform weights over ``S``; the gate is bypassed."""
    n = len(scen.fleet)
    mask = as_mask(S, n).require_nonempty()
    W = routing_weights(None, mask, scen.test_workload.embeddings(), None, n)
    return _outcome(scen, W, mask)


def run_moe2(S: SubsetMask, scen: Scenario, k: int | None) -> MethodOutcome:
    kk = None if k is None else min(k, len(S))
    W = routing_weights(scen.theta, S, scen.test_workload.embeddings(), kk, len(scen.fleet))
    return _outcome(scen, W, S, gated=True)


def sample_feasible_mask(feasible, n: int, rng: np.random.Generator,
                         max_draws: int = 10_000) -> tuple[SubsetMask, int]:
    """Rejection-sample a uniformly random nonempty feasible mask; returns it with the draw count."""
    for draw in range(1, max_draws + 1):
        bits = int(rng.integers(1, 1 << n))
        if feasible(bits):
            return SubsetMask(bits, n), draw
    raise InfeasibleProblem(f"no feasible mask in {max_draws} random draws")


def run_baseline_random_subset(constraints: ConstraintSet, scen: Scenario, rng: np.random.Generator,
                               max_draws: int = 10_000) -> MethodOutcome:
    mask, draws = sample_feasible_mask(Feasibility(scen.costs, constraints), len(scen.fleet), rng, max_draws)
    out = run_baseline_majority_vote(mask, scen)
    return MethodOutcome(out.accuracy, mask, out.delay_by_class, out.energy, draws)


def expert_accuracies(scen: Scenario) -> np.ndarray:
    n = len(scen.fleet)
    return np.array([run_baseline_majority_vote(SubsetMask(1 << i, n), scen).accuracy for i in range(n)])


def average_expert_accuracy(scen: Scenario) -> float:
    """Mean over experts of their standalone accuracy on the held-out split."""
    return float(expert_accuracies(scen).mean())


def single_agent_accuracy(scen: Scenario, competence: float = 0.15) -> MethodOutcome:
    """A generalist base model answering alone."""
    g = generalist_expert(scen.fleet, competence)
    out = expert_outputs([g], scen.test_workload)
    table = CostTable([g], scen.test_workload)
    c = table.expected(1)
    acc = batch_accuracy(out, np.ones((len(scen.test_workload), 1)))
    return MethodOutcome(acc, None, tuple(float(x) for x in c.delay_by_class), c.energy)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    tau_max: float
    e_max: float
    k: int | None
    seed: int
    status: str                    # "ok" or "infeasible"
    accuracy: float | None
    delay_by_class: tuple[float, ...] | None
    energy: float | None
    mask: str | None               # bitstring, expert 0 first
    feasible: bool | None          # mask checked against the cell's constraints
    draws: int = 0

    def key(self) -> tuple:
        return (self.method, self.tau_max, self.e_max, self.k, self.seed)


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": 1, "kind": "results", "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultTable":
        if d.get("kind") != "results":
            raise ValueError("not a results document")
        rows = []
        for r in d["rows"]:
            r = dict(r)
            if r["delay_by_class"] is not None:
                r["delay_by_class"] = tuple(r["delay_by_class"])
            rows.append(ResultRow(**r))
        return cls(rows)

    def select(self, **match) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def mean_accuracy(self, method: str, tau: float, e_max: float, k=None) -> float | None:
        """Mean over seeds, or None when every replicate of the cell is infeasible."""
        rows = [r for r in self.select(method=method, tau_max=tau, e_max=e_max)
                if (method not in ("moe2",) or r.k == k) and r.status == "ok"]
        if not rows:
            return None
        return float(np.mean([r.accuracy for r in rows]))

    def labels(self) -> list[tuple[str, int | None]]:
        seen = []
        for r in self.rows:
            lab = (r.method, r.k if r.method == "moe2" else None)
            if lab not in seen:
                seen.append(lab)
        return seen

    def to_csv(self, tau: float) -> str:
        """Seed-averaged accuracy for one deadline: methods as rows, E_max as columns."""
        energies = sorted({r.e_max for r in self.rows if r.tau_max == tau})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"E_max={e:g}" for e in energies])
        for method, k in self.labels():
            name = method if k is None and method != "moe2" else f"{method}(k={'all' if k is None else k})"
            cells = []
            for e in energies:
                acc = self.mean_accuracy(method, tau, e, k)
                cells.append("infeasible" if acc is None else f"{100 * acc:.2f}")
            w.writerow([name] + cells)
        return buf.getvalue()


def _row(method, tau, e, k, seed, out: MethodOutcome | None, feasible: bool | None) -> ResultRow:
    if out is None:
        return ResultRow(method, tau, e, k, seed, "infeasible", None, None, None, None, None)
    return ResultRow(method, tau, e, k, seed, "ok", out.accuracy, out.delay_by_class, out.energy,
                     None if out.mask is None else out.mask.bitstring(), feasible, out.draws)


def run_replicate(config: ExperimentConfig, seed: int, scen: Scenario | None = None) -> list[ResultRow]:
    scen = scen if scen is not None else build_scenario(config, seed)
    n = len(scen.fleet)
    M = config.workload.n_classes
    rows: list[ResultRow] = []
    if config.objective == "restricted":
        objective = restricted_objective(scen.theta, scen.train_data)
    else:
        objective = tabular_objective(scen.train_data)
    rand_rng = seeded_rng(int(np.random.SeedSequence([seed, 0x72616E64]).generate_state(1)[0]))

    fixed: dict[str, MethodOutcome] = {}
    if "single_agent" in config.methods:
        fixed["single_agent"] = single_agent_accuracy(scen, config.generalist_competence)
    if "majority_vote_full" in config.methods:
        fixed["majority_vote_full"] = run_baseline_majority_vote(SubsetMask.full(n), scen)
    if "average_expert_accuracy" in config.methods:
        acc = average_expert_accuracy(scen)
        fixed["average_expert_accuracy"] = MethodOutcome(acc, None, None, None)

    for tau, e in config.cells():
        constraints = ConstraintSet.uniform(tau, e, M)
        feasible = Feasibility(scen.costs, constraints)
        chosen = None
        if "moe2" in config.methods or "smo_mv" in config.methods:
            try:
                chosen = smo_select(objective, feasible, n, config.smo).mask
            except InfeasibleProblem:
                chosen = None
        for method in config.methods:
            if method == "moe2":
                for k in config.k_values:
                    out = None if chosen is None else run_moe2(chosen, scen, k)
                    rows.append(_row(method, tau, e, k, seed, out, None if chosen is None else True))
            elif method == "smo_mv":
                out = None if chosen is None else run_baseline_majority_vote(chosen, scen)
                rows.append(_row(method, tau, e, None, seed, out, None if chosen is None else True))
            elif method == "rand_mv":
                try:
                    out = run_baseline_random_subset(constraints, scen, rand_rng, config.rand_max_draws)
                except InfeasibleProblem:
                    out = None
                rows.append(_row(method, tau, e, None, seed, out, None if out is None else True))
            else:
                out = fixed[method]
                ok = None if out.mask is None else feasible(out.mask)
                rows.append(_row(method, tau, e, None, seed, out, ok))
    return rows


def run_experiment(config: ExperimentConfig) -> ResultTable:
    table = ResultTable()
    for seed in config.seeds:
        log.info("replicate seed=%d", seed)
        table.rows.extend(run_replicate(config, seed))
    return table
