"""Core data types shared by every module.

Everything here is immutable after construction. Arrays held by the
dataclasses are flagged read-only so accidental in-place edits fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_VOCAB_SIZE = 64
SCHEMA_VERSION = 1
DIST_ATOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

def seeded_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed``.

    Philox is counter-based, so streams are identical across platforms and
    numpy versions that keep the bit generator stable.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def substreams(seed: int, n: int) -> list[np.random.Generator]:
    """Split ``seed`` into ``n`` independent Philox streams."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def keyed_rng(key: int, *counter: int) -> np.random.Generator:
    """Philox stream addressed directly by (key, counter words).

    Used for noise that must be a pure function of a few integer ids.
    Up to three counter words are supported.
    """
    if len(counter) > 3:
        raise ValueError("at most three counter words")
    words = [int(key) & 0xFFFFFFFFFFFFFFFF, 0x6D6F6532]
    ctr = [0, *[int(c) for c in counter]] + [0] * (3 - len(counter))
    return np.random.Generator(np.random.Philox(counter=ctr, key=words))


# --------------------------------------------------------------------------
# experts
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExpertProfile:
    """One simulated edge LLM.

    Cost fields follow the per-token delay model: ``flops_per_token`` is the
    FLOP cost per token of context, ``compute_capability`` in FLOP/s,
    ``mem_access_size`` bytes read per step, ``mem_bandwidth`` bytes/s,
    ``overhead_seconds`` a fixed per-step overhead and ``data_rate`` the link
    rate in bytes/s. Energy per generated token is
    ``energy_base + energy_per_context_token * context_length``.

    ``shared_noise_weight`` is the fraction of the expert's off-target mass
    drawn from a distractor stream shared by every expert with the same
    ``shared_noise_seed``; the rest is private to the expert.
    """

    id: int
    competence: np.ndarray
    sharpness: float
    flops_per_token: float
    compute_capability: float
    mem_access_size: float
    mem_bandwidth: float
    overhead_seconds: float
    data_rate: float
    energy_base: float
    energy_per_context_token: float
    noise_seed: int = 0
    home_cluster: int | None = None
    shared_noise_seed: int = 0
    shared_noise_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "competence", _frozen(self.competence))
        c = self.competence
        if c.ndim != 1 or c.size == 0:
            raise ValueError("competence must be a nonempty vector")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError(f"expert {self.id}: competence entries must lie in [0, 1]")
        for name in ("sharpness", "flops_per_token", "compute_capability",
                     "mem_bandwidth", "data_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"expert {self.id}: {name} must be > 0")
        for name in ("mem_access_size", "overhead_seconds", "energy_base",
                     "energy_per_context_token"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"expert {self.id}: {name} must be >= 0")
        if not 0 <= self.shared_noise_weight <= 1:
            raise ValueError(f"expert {self.id}: shared_noise_weight must lie in [0, 1]")

    @property
    def n_clusters(self) -> int:
        return self.competence.size

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "id", "sharpness", "flops_per_token", "compute_capability",
            "mem_access_size", "mem_bandwidth", "overhead_seconds", "data_rate",
            "energy_base", "energy_per_context_token", "noise_seed", "home_cluster",
            "shared_noise_seed", "shared_noise_weight")}
        d["competence"] = self.competence.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertProfile":
        return cls(**d)


def validate_fleet(fleet: Sequence[ExpertProfile]) -> None:
    if not fleet:
        raise ValueError("fleet is empty")
    ids = [e.id for e in fleet]
    if sorted(ids) != list(range(len(fleet))):
        raise ValueError(f"expert ids must be unique and contiguous from 0, got {ids}")
    if ids != sorted(ids):
        raise ValueError("fleet must be ordered by expert id")
    k = {e.n_clusters for e in fleet}
    if len(k) != 1:
        raise ValueError("experts disagree on the number of clusters")


# --------------------------------------------------------------------------
# prompts and workloads
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Prompt:
    id: int
    embedding: np.ndarray
    app_class: int
    cluster_label: int
    prompt_length_tokens: int
    data_size_bytes: float
    answer: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "embedding", _frozen(self.embedding))
        object.__setattr__(self, "answer", tuple(int(a) for a in self.answer))
        if not self.answer:
            raise ValueError(f"prompt {self.id}: answer must be nonempty")
        if min(self.answer) < 0:
            raise ValueError(f"prompt {self.id}: negative token id")
        if self.prompt_length_tokens < 1:
            raise ValueError(f"prompt {self.id}: prompt_length_tokens must be >= 1")
        if not self.data_size_bytes > 0:
            raise ValueError(f"prompt {self.id}: data_size_bytes must be > 0")

    @property
    def answer_length(self) -> int:
        return len(self.answer)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "embedding": self.embedding.tolist(),
            "app_class": self.app_class,
            "cluster_label": self.cluster_label,
            "prompt_length_tokens": self.prompt_length_tokens,
            "data_size_bytes": self.data_size_bytes,
            "answer": list(self.answer),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Prompt":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Workload:
    """An ordered prompt collection plus the constants it was built with."""

    prompts: tuple[Prompt, ...]
    vocab_size: int = DEFAULT_VOCAB_SIZE
    n_classes: int = 1

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(self.prompts))
        for p in self.prompts:
            if max(p.answer) >= self.vocab_size:
                raise ValueError(f"prompt {p.id}: token id outside vocabulary")
            if not 0 <= p.app_class < self.n_classes:
                raise ValueError(f"prompt {p.id}: app_class {p.app_class} out of range")
        ids = [p.id for p in self.prompts]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate prompt ids")

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    def __getitem__(self, i):
        return self.prompts[i]

    def subset(self, indices: Iterable[int]) -> "Workload":
        return Workload(tuple(self.prompts[i] for i in indices), self.vocab_size, self.n_classes)

    def embeddings(self) -> np.ndarray:
        return np.stack([p.embedding for p in self.prompts])

    def app_classes(self) -> np.ndarray:
        return np.array([p.app_class for p in self.prompts], dtype=int)

    def cluster_labels(self) -> np.ndarray:
        return np.array([p.cluster_label for p in self.prompts], dtype=int)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "workload",
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "prompts": [p.to_dict() for p in self.prompts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Workload":
        _check_schema(d, "workload")
        return cls(tuple(Prompt.from_dict(p) for p in d["prompts"]),
                   d["vocab_size"], d["n_classes"])


def fleet_to_dict(fleet: Sequence[ExpertProfile]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "fleet",
            "experts": [e.to_dict() for e in fleet]}


def fleet_from_dict(d: dict) -> list[ExpertProfile]:
    _check_schema(d, "fleet")
    fleet = [ExpertProfile.from_dict(e) for e in d["experts"]]
    validate_fleet(fleet)
    return fleet


def _check_schema(d: dict, kind: str) -> None:
    if d.get("kind") != kind:
        raise ValueError(f"expected a {kind!r} document, got {d.get('kind')!r}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")


# --------------------------------------------------------------------------
# subsets and constraints
# --------------------------------------------------------------------------

@dataclass(frozen=True, order=False)
class SubsetMask:
    """Expert subset as an integer bitmask: expert n is selected iff bit n is set."""

    bits: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.bits < 0 or self.bits >> self.n:
            raise ValueError(f"bits {self.bits:#x} do not fit in {self.n} experts")

    @classmethod
    def from_members(cls, members: Iterable[int], n: int) -> "SubsetMask":
        bits = 0
        for m in members:
            if not 0 <= m < n:
                raise ValueError(f"expert {m} out of range for n={n}")
            bits |= 1 << int(m)
        return cls(bits, n)

    @classmethod
    def full(cls, n: int) -> "SubsetMask":
        return cls((1 << n) - 1, n)

    @classmethod
    def from_array(cls, arr) -> "SubsetMask":
        arr = np.asarray(arr).astype(bool)
        return cls.from_members(np.flatnonzero(arr).tolist(), arr.size)

    def members(self) -> list[int]:
        return [i for i in range(self.n) if self.bits >> i & 1]

    def as_array(self) -> np.ndarray:
        return np.array([(self.bits >> i) & 1 for i in range(self.n)], dtype=bool)

    @property
    def popcount(self) -> int:
        return bin(self.bits).count("1")

    def __len__(self) -> int:
        return self.popcount

    def __contains__(self, n: int) -> bool:
        return 0 <= n < self.n and bool(self.bits >> n & 1)

    def issubset(self, other: "SubsetMask") -> bool:
        return self.bits & ~other.bits == 0

    def require_nonempty(self) -> "SubsetMask":
        if self.bits == 0:
            raise ValueError("expert subset must be nonempty")
        return self

    def bitstring(self) -> str:
        """Expert 0 first."""
        return "".join("1" if i in self else "0" for i in range(self.n))

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.members())) + "}"


def tie_break_key(bits: int) -> tuple[int, int]:
    """Preference order for equal objectives: fewer experts, then smaller mask."""
    return (bin(bits).count("1"), bits)


def as_mask(S, n: int) -> SubsetMask:
    """Accept a SubsetMask, an int bitmask, a bool array or an iterable of ids."""
    if isinstance(S, SubsetMask):
        if S.n != n:
            raise ValueError(f"mask is over {S.n} experts, expected {n}")
        return S
    if isinstance(S, (int, np.integer)):
        return SubsetMask(int(S), n)
    arr = np.asarray(S)
    if arr.dtype == bool:
        if arr.size != n:
            raise ValueError(f"bool mask has length {arr.size}, expected {n}")
        return SubsetMask.from_array(arr)
    return SubsetMask.from_members(arr.astype(int).tolist(), n)


@dataclass(frozen=True)
class ConstraintSet:
    """Per-class delay deadlines and a single energy budget. ``inf`` is allowed."""

    tau_max: tuple[float, ...]
    e_max: float

    def __post_init__(self):
        object.__setattr__(self, "tau_max", tuple(float(t) for t in self.tau_max))
        if not self.tau_max:
            raise ValueError("tau_max needs one entry per application class")
        if any(not t > 0 for t in self.tau_max) or not self.e_max > 0:
            raise ValueError("constraints must be strictly positive")

    @property
    def n_classes(self) -> int:
        return len(self.tau_max)

    @classmethod
    def unconstrained(cls, n_classes: int) -> "ConstraintSet":
        return cls((float("inf"),) * n_classes, float("inf"))

    @classmethod
    def uniform(cls, tau: float, e_max: float, n_classes: int) -> "ConstraintSet":
        return cls((float(tau),) * n_classes, float(e_max))

    def to_dict(self) -> dict:
        return {"tau_max": list(self.tau_max), "e_max": self.e_max}

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSet":
        return cls(tuple(d["tau_max"]), d["e_max"])


# --------------------------------------------------------------------------
# token distributions and history
# --------------------------------------------------------------------------

def check_distribution(probs: np.ndarray, atol: float = DIST_ATOL) -> None:
    probs = np.asarray(probs)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("distribution must be a nonempty vector")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("distribution has negative or non-finite entries")
    if abs(probs.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {probs.sum():.12g}, not 1")


@dataclass(frozen=True, eq=False)
class VocabDistribution:
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))
        check_distribution(self.probs)

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class History:
    prompt_ref: int
    prompt_length_tokens: int
    generated: tuple[int, ...] = field(default_factory=tuple)

    @property
    def context_length_tokens(self) -> int:
        return self.prompt_length_tokens + len(self.generated)

    @property
    def step(self) -> int:
        """1-based index of the token this history is about to produce."""
        return len(self.generated) + 1

    def extend(self, token: int) -> "History":
        return History(self.prompt_ref, self.prompt_length_tokens, self.generated + (int(token),))
