"""Synthetic workloads, heterogeneous expert fleets and expert token models.

Prompts are drawn from a Gaussian mixture over embedding space, one component
per domain cluster. Each expert has a home cluster where it is competent and
a hardware tier that fixes its delay/energy profile.

Expert token distributions are a frozen blend::

    c    = competence[cluster_label]
    peak = sigmoid(sharpness * c) on the true token y_t, rest spread uniformly
    f    = c * peak + (1 - c) * noise

where ``noise`` mixes a private Dirichlet(alpha) draw keyed by (noise_seed,
expert id, prompt id, step) with a distractor draw keyed by (shared seed,
prompt id, step) that every expert of a fleet sees. The shared part makes
weak experts wrong in the same way, so averaging many of them does not
cancel their errors. Everything is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .domain import (
    DEFAULT_VOCAB_SIZE,
    ExpertProfile,
    Prompt,
    VocabDistribution,
    Workload,
    keyed_rng,
    validate_fleet,
)

NOISE_CONCENTRATION = 0.3
SHARED_STREAM = 0xFFFFFFFF   # counter word reserved for the shared distractor


# --------------------------------------------------------------------------
# workloads
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadSpec:
    n_prompts: int = 1000
    embedding_dim: int = 32
    n_clusters: int = 8
    cluster_centers: np.ndarray | None = None
    center_scale: float = 1.5
    cluster_spread: float = 1.0
    # None means uniform mixing
    cluster_weights: tuple[float, ...] | None = None
    answer_length_range: tuple[int, int] = (2, 4)
    # lognormal prompt length, clipped to bounds, scaled per application class
    prompt_length_median: float = 200.0
    prompt_length_sigma: float = 0.5
    prompt_length_bounds: tuple[int, int] = (8, 2048)
    class_length_scale: tuple[float, ...] | None = None
    n_classes: int = 2
    # cluster -> application class; None means cluster % n_classes
    app_class_map: tuple[int, ...] | None = None
    vocab_size: int = DEFAULT_VOCAB_SIZE
    bytes_per_prompt_token: float = 4.0
    stop_token: int | None = None

    def validate(self) -> None:
        if self.n_prompts < 1 or self.embedding_dim < 1 or self.n_clusters < 1:
            raise ValueError("n_prompts, embedding_dim and n_clusters must be >= 1")
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be > 0")
        t_min, t_max = self.answer_length_range
        if t_min < 1 or t_max < t_min:
            raise ValueError(f"bad answer_length_range {self.answer_length_range}")
        if self.cluster_centers is not None:
            c = np.asarray(self.cluster_centers)
            if c.shape != (self.n_clusters, self.embedding_dim):
                raise ValueError(f"cluster_centers must be {self.n_clusters}x{self.embedding_dim}")
        if self.cluster_weights is not None:
            w = np.asarray(self.cluster_weights, dtype=float)
            if w.shape != (self.n_clusters,) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("cluster_weights must be K nonnegative numbers with a positive sum")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.app_class_map is not None:
            if len(self.app_class_map) != self.n_clusters:
                raise ValueError("app_class_map needs one entry per cluster")
            if any(not 0 <= m < self.n_classes for m in self.app_class_map):
                raise ValueError("app_class_map entry out of range")
        if self.class_length_scale is not None and len(self.class_length_scale) != self.n_classes:
            raise ValueError("class_length_scale needs one entry per class")
        lo, hi = self.prompt_length_bounds
        if lo < 1 or hi < lo:
            raise ValueError(f"bad prompt_length_bounds {self.prompt_length_bounds}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.stop_token is not None and not 0 <= self.stop_token < self.vocab_size:
            raise ValueError("stop_token outside vocabulary")

    def class_of(self, cluster: int) -> int:
        if self.app_class_map is None:
            return cluster % self.n_classes
        return self.app_class_map[cluster]


def answer_token_model(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-(cluster, position) logits over the vocabulary; answers are the argmax."""
    t_max = spec.answer_length_range[1]
    logits = rng.standard_normal((spec.n_clusters, t_max, spec.vocab_size))
    if spec.stop_token is not None:
        logits[:, :, spec.stop_token] = -np.inf
    return logits


def generate_workload(spec: WorkloadSpec, rng: np.random.Generator) -> Workload:
    """Draw ``spec.n_prompts`` prompts from a Gaussian mixture.

    Draw order is fixed (centers, token model, then per-prompt fields in
    bulk) so the result is a pure function of ``spec`` and the rng state.
    """
    spec.validate()
    K, d = spec.n_clusters, spec.embedding_dim
    if spec.cluster_centers is None:
        centers = rng.normal(0.0, spec.center_scale, size=(K, d))
    else:
        centers = np.asarray(spec.cluster_centers, dtype=float)
    answers_by_cluster = answer_token_model(spec, rng).argmax(axis=2)

    if spec.cluster_weights is None:
        weights = np.full(K, 1.0 / K)
    else:
        weights = np.asarray(spec.cluster_weights, dtype=float)
        weights = weights / weights.sum()
    n = spec.n_prompts
    labels = rng.choice(K, size=n, p=weights)
    noise = rng.standard_normal((n, d)) * spec.cluster_spread
    t_min, t_max = spec.answer_length_range
    lengths_t = rng.integers(t_min, t_max + 1, size=n)
    log_len = rng.normal(np.log(spec.prompt_length_median), spec.prompt_length_sigma, size=n)

    class_scale = (np.ones(spec.n_classes) if spec.class_length_scale is None
                   else np.asarray(spec.class_length_scale, dtype=float))
    lo, hi = spec.prompt_length_bounds
    prompts = []
    for i in range(n):
        k = int(labels[i])
        m = spec.class_of(k)
        plen = int(np.clip(round(np.exp(log_len[i]) * class_scale[m]), lo, hi))
        answer = answers_by_cluster[k, : lengths_t[i]].tolist()
        if spec.stop_token is not None:
            answer[-1] = spec.stop_token
        prompts.append(Prompt(
            id=i,
            embedding=centers[k] + noise[i],
            app_class=m,
            cluster_label=k,
            prompt_length_tokens=plen,
            data_size_bytes=plen * spec.bytes_per_prompt_token,
            answer=tuple(answer),
        ))
    return Workload(tuple(prompts), spec.vocab_size, spec.n_classes)


def split_indices(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, test) index arrays of a random split."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def train_test_split(workload: Workload, test_fraction: float,
                     rng: np.random.Generator) -> tuple[Workload, Workload]:
    train_idx, test_idx = split_indices(len(workload), test_fraction, rng)
    return workload.subset(train_idx.tolist()), workload.subset(test_idx.tolist())


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    wcss: float
    n_iter: int
    wcss_history: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_cluster(embeddings, K: int, rng: np.random.Generator,
                   tol: float = 1e-6, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops once the largest center shift drops below ``tol`` or after
    ``max_iter`` iterations. An emptied cluster is re-seeded at the point
    farthest from its current center.
    """
    X = np.asarray(embeddings, dtype=float)
    if X.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    if K < 1 or K > X.shape[0]:
        raise ValueError(f"K={K} must be between 1 and the number of points ({X.shape[0]})")
    centers = kmeans_plusplus_init(X, K, rng)
    history = []
    labels = np.zeros(X.shape[0], dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, centers)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(X.shape[0]), labels].sum()))
        new = centers.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new[k] = X[members].mean(axis=0)
            else:
                far = d2[np.arange(X.shape[0]), labels].argmax()
                new[k] = X[far]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    wcss = float(d2[np.arange(X.shape[0]), labels].sum())
    history.append(wcss)
    return KMeansResult(labels, centers, wcss, it, history)


# --------------------------------------------------------------------------
# fleets
# --------------------------------------------------------------------------

COST_FIELDS = (
    "flops_per_token", "compute_capability", "mem_access_size", "mem_bandwidth",
    "overhead_seconds", "data_rate", "energy_base", "energy_per_context_token",
)


@dataclass(frozen=True)
class HardwareTier:
    """A group of servers sharing cost-parameter ranges (uniform draws)."""

    name: str
    count: int
    ranges: dict

    def __post_init__(self):
        missing = set(COST_FIELDS) - set(self.ranges)
        if missing:
            raise ValueError(f"tier {self.name!r} lacks ranges for {sorted(missing)}")
        for k, (lo, hi) in self.ranges.items():
            if hi < lo:
                raise ValueError(f"tier {self.name!r}: empty range for {k}")


# Fast tier: RTX-class servers, low delay / high energy.
# Slow tier: Jetson-class servers, high delay / low energy.
FAST_TIER = HardwareTier("fast", 3, {
    "flops_per_token": (2.0e9, 2.0e9),
    "compute_capability": (0.9e12, 1.2e12),
    "mem_access_size": (1.0e8, 1.0e8),
    "mem_bandwidth": (5.0e11, 1.0e12),
    "overhead_seconds": (0.02, 0.04),
    "data_rate": (5.0e6, 1.0e7),
    "energy_base": (1.5, 2.5),
    "energy_per_context_token": (0.008, 0.012),
})
SLOW_TIER = HardwareTier("slow", 5, {
    "flops_per_token": (2.0e9, 2.0e9),
    "compute_capability": (1.9e11, 3.2e11),
    "mem_access_size": (1.0e8, 1.0e8),
    "mem_bandwidth": (1.0e11, 2.0e11),
    "overhead_seconds": (0.05, 0.1),
    "data_rate": (2.0e6, 5.0e6),
    "energy_base": (0.6, 1.0),
    "energy_per_context_token": (0.003, 0.005),
})


@dataclass(frozen=True)
class FleetSpec:
    n_experts: int = 8
    k_clusters: int = 8
    hardware_tiers: tuple[HardwareTier, ...] = (FAST_TIER, SLOW_TIER)
    competence_home: float = 0.9
    competence_off_low: float = 0.0
    competence_off_width: float = 0.02
    sharpness_range: tuple[float, float] = (8.0, 8.0)
    shuffle_tiers: bool = True
    shared_noise_weight: float = 0.5

    def validate(self) -> None:
        if self.n_experts < 1 or self.k_clusters < 1:
            raise ValueError("n_experts and k_clusters must be >= 1")
        if sum(t.count for t in self.hardware_tiers) != self.n_experts:
            raise ValueError("tier counts must sum to n_experts")
        for c in (self.competence_home, self.competence_off_low,
                  self.competence_off_low + self.competence_off_width):
            if not 0 <= c <= 1:
                raise ValueError("competence parameters must stay within [0, 1]")
        lo, hi = self.sharpness_range
        if not 0 < lo <= hi:
            raise ValueError("sharpness_range must be positive and ordered")
        if not 0 <= self.shared_noise_weight <= 1:
            raise ValueError("shared_noise_weight must lie in [0, 1]")


def home_cluster_assignment(n_experts: int, k_clusters: int, labels=None) -> list[int]:
    """Map experts to home clusters.

    Clusters are visited from most to least populous (per ``labels``; index
    order when labels are absent), cycling when there are more experts than
    clusters. With N == K the map is a bijection and cluster n goes to
    expert n.
    """
    if n_experts == k_clusters:
        return list(range(n_experts))
    if labels is None:
        order = list(range(k_clusters))
    else:
        counts = np.bincount(np.asarray(labels, dtype=int), minlength=k_clusters)
        order = sorted(range(k_clusters), key=lambda k: (-counts[k], k))
    return [order[i % k_clusters] for i in range(n_experts)]


def generate_fleet(spec: FleetSpec, labels, rng: np.random.Generator) -> list[ExpertProfile]:
    spec.validate()
    N, K = spec.n_experts, spec.k_clusters
    homes = home_cluster_assignment(N, K, labels)
    tier_of = np.concatenate([[i] * t.count for i, t in enumerate(spec.hardware_tiers)]).astype(int)
    if spec.shuffle_tiers:
        tier_of = rng.permutation(tier_of)
    shared_seed = int(rng.integers(0, 2**63))
    fleet = []
    for n in range(N):
        competence = spec.competence_off_low + spec.competence_off_width * rng.random(K)
        competence[homes[n]] = spec.competence_home
        tier = spec.hardware_tiers[tier_of[n]]
        costs = {k: float(rng.uniform(*tier.ranges[k])) for k in COST_FIELDS}
        fleet.append(ExpertProfile(
            id=n,
            competence=competence,
            sharpness=float(rng.uniform(*spec.sharpness_range)),
            noise_seed=int(rng.integers(0, 2**63)),
            home_cluster=homes[n],
            shared_noise_seed=shared_seed,
            shared_noise_weight=spec.shared_noise_weight,
            **costs,
        ))
    validate_fleet(fleet)
    return fleet


def generalist_expert(fleet: Sequence[ExpertProfile], competence: float = 0.15,
                      noise_seed: int = 0) -> ExpertProfile:
    """An un-specialised base model with flat competence, used as the single-agent baseline.

    Its id is ``len(fleet)`` so its noise stream never collides with a fleet member.
    Cost parameters are the fleet medians.
    """
    ref = fleet[0]
    med = {k: float(np.median([getattr(e, k) for e in fleet])) for k in COST_FIELDS}
    return ExpertProfile(
        id=len(fleet),
        competence=np.full(ref.n_clusters, competence),
        sharpness=float(np.median([e.sharpness for e in fleet])),
        noise_seed=noise_seed,
        home_cluster=None,
        shared_noise_seed=ref.shared_noise_seed,
        shared_noise_weight=ref.shared_noise_weight,
        **med,
    )


# --------------------------------------------------------------------------
# expert token distributions
# --------------------------------------------------------------------------

def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def _dirichlet(rng: np.random.Generator, concentration: float, size: int) -> np.ndarray:
    g = rng.gamma(concentration, size=size)
    total = g.sum()
    if total <= 0:
        return np.full(size, 1.0 / size)
    return g / total


def keyed_noise(expert: ExpertProfile, prompt_id: int, step: int, vocab_size: int,
                concentration: float = NOISE_CONCENTRATION) -> np.ndarray:
    """Off-target distribution of ``expert`` at one step: shared distractor plus private noise."""
    private = _dirichlet(keyed_rng(expert.noise_seed, expert.id, prompt_id, step), concentration, vocab_size)
    rho = expert.shared_noise_weight
    if rho == 0:
        return private
    shared = _dirichlet(keyed_rng(expert.shared_noise_seed, SHARED_STREAM, prompt_id, step),
                        concentration, vocab_size)
    return rho * shared + (1.0 - rho) * private


def blend(expert: ExpertProfile, cluster: int, target: int, noise: np.ndarray) -> np.ndarray:
    V = noise.size
    c = float(expert.competence[cluster])
    p_peak = _sigmoid(expert.sharpness * c)
    peak = np.full(V, (1.0 - p_peak) / (V - 1))
    peak[target] = p_peak
    return c * peak + (1.0 - c) * noise


def expert_next_token_dist(expert: ExpertProfile, prompt: Prompt, step: int,
                           vocab_size: int = DEFAULT_VOCAB_SIZE,
                           noise_concentration: float = NOISE_CONCENTRATION) -> VocabDistribution:
    """Distribution of ``expert`` over token ``step`` (1-based) of ``prompt``'s answer."""
    T = prompt.answer_length
    if not 1 <= step <= T:
        raise ValueError(f"step {step} outside 1..{T}")
    noise = keyed_noise(expert, prompt.id, step, vocab_size, noise_concentration)
    return VocabDistribution(blend(expert, prompt.cluster_label, prompt.answer[step - 1], noise))


@dataclass(frozen=True, eq=False)
class ExpertOutputs:
    """Every expert's distribution at every answer step of a workload.

    ``dists`` has shape (prompts, T_max, experts, V); steps past a prompt's
    answer length are zero and masked out by ``mask``. ``target`` holds
    f_{n, y_t} for each (prompt, step, expert).
    """

    dists: np.ndarray
    mask: np.ndarray
    answers: np.ndarray
    lengths: np.ndarray

    @property
    def target(self) -> np.ndarray:
        idx = np.where(self.mask, self.answers, 0)
        t = np.take_along_axis(self.dists, idx[:, :, None, None], axis=3)[..., 0]
        return np.where(self.mask[:, :, None], t, 1.0)

    @property
    def n_experts(self) -> int:
        return self.dists.shape[2]

    def subset(self, indices) -> "ExpertOutputs":
        idx = np.asarray(indices, dtype=int)
        return ExpertOutputs(self.dists[idx], self.mask[idx], self.answers[idx], self.lengths[idx])


def expert_outputs(fleet: Sequence[ExpertProfile], workload: Workload,
                   noise_concentration: float = NOISE_CONCENTRATION) -> ExpertOutputs:
    P, N, V = len(workload), len(fleet), workload.vocab_size
    lengths = np.array([p.answer_length for p in workload], dtype=int)
    T = int(lengths.max())
    dists = np.zeros((P, T, N, V))
    answers = np.full((P, T), -1, dtype=int)
    for i, p in enumerate(workload):
        answers[i, : p.answer_length] = p.answer
        for n, e in enumerate(fleet):
            for t in range(1, p.answer_length + 1):
                noise = keyed_noise(e, p.id, t, V, noise_concentration)
                dists[i, t - 1, n] = blend(e, p.cluster_label, p.answer[t - 1], noise)
    mask = np.arange(T)[None, :] < lengths[:, None]
    for arr in (dists, answers, mask, lengths):
        arr.setflags(write=False)
    return ExpertOutputs(dists, mask, answers, lengths)


def with_ids(fleet: Sequence[ExpertProfile]) -> list[ExpertProfile]:
    """Renumber a fleet 0..N-1 in its current order."""
    return [replace(e, id=i) for i, e in enumerate(fleet)]
