"""Per-prompt top-k expert selection and autoregressive answer generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costs import CostBreakdown, cost_breakdown
from .domain import DEFAULT_VOCAB_SIZE, ExpertProfile, History, Prompt, Workload, as_mask, keyed_rng
from .gating import GatingParams, fuse_distributions, gating_forward, normalize_weights, positive_scores
from .synth import ExpertOutputs, expert_next_token_dist


@dataclass(frozen=True)
class InferenceConfig:
    k: int | None = 2            # None: use every expert in the subset
    mode: str = "greedy"         # "greedy" or "sample"
    seed: int = 0
    max_tokens: int | None = None
    stop_token: int | None = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def effective_k(self, subset_size: int) -> int:
        k = subset_size if self.k is None else self.k
        if k > subset_size:
            raise ValueError(f"k={k} exceeds subset size {subset_size}")
        return k


def top_k_from_scores(g, S, k: int) -> list[int]:
    """Members of ``S`` with the ``k`` largest scores, descending; ties go to the smaller id."""
    g = np.asarray(g, dtype=float)
    members = as_mask(S, g.size).require_nonempty().members()
    if not 1 <= k <= len(members):
        raise ValueError(f"k={k} must lie in 1..{len(members)}")
    return sorted(members, key=lambda n: (-g[n], n))[:k]


def top_k_select(theta: GatingParams, S, x, k: int) -> list[int]:
    return top_k_from_scores(positive_scores(gating_forward(theta, x)), S, k)


def top_k_weights(theta: GatingParams, S, x, k: int) -> np.ndarray:
    """Weights over the selected experts, in the order returned by ``top_k_select``."""
    g = positive_scores(gating_forward(theta, x))
    gamma = top_k_from_scores(g, S, k)
    return normalize_weights(g, gamma)[gamma]


def uniform_selection(S, n: int) -> tuple[list[int], np.ndarray]:
    """Majority-vote routing: every member of ``S`` with weight 1/|S|."""
    members = as_mask(S, n).require_nonempty().members()
    return members, np.full(len(members), 1.0 / len(members))


@dataclass(frozen=True)
class Answer:
    prompt_id: int
    tokens: tuple[int, ...]
    experts: tuple[int, ...]
    weights: tuple[float, ...]
    costs: CostBreakdown          # over the queried experts
    subset_costs: CostBreakdown   # worst case over the whole subset

    def to_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "tokens": list(self.tokens), "experts": list(self.experts),
                "weights": list(self.weights),
                "delay": self.costs.mean_delay, "energy": self.costs.mean_energy,
                "subset_delay": self.subset_costs.mean_delay, "subset_energy": self.subset_costs.mean_energy}


def generate_answer(theta: GatingParams | None, S, prompt: Prompt, fleet: Sequence[ExpertProfile],
                    config: InferenceConfig = InferenceConfig(), vocab_size: int = DEFAULT_VOCAB_SIZE,
                    gate_delay: float = 0.0) -> Answer:
    """Route once, then decode token by token from the fused distribution.

    With ``theta=None`` the gate is bypassed and all of ``S`` is weighted
    uniformly. Generation stops at the stop token, ``max_tokens``, or the
    prompt's answer length (the synthetic experts define distributions only
    over the answer's positions).
    """
    n = len(fleet)
    mask = as_mask(S, n).require_nonempty()
    if theta is None:
        gamma, w = uniform_selection(mask, n)
    else:
        k = config.effective_k(len(mask))
        g = positive_scores(gating_forward(theta, prompt.embedding))
        gamma = top_k_from_scores(g, mask, k)
        w = normalize_weights(g, gamma)[gamma]
    limit = prompt.answer_length if config.max_tokens is None else min(config.max_tokens, prompt.answer_length)
    rng = keyed_rng(config.seed, prompt.id) if config.mode == "sample" else None
    history = History(prompt.id, prompt.prompt_length_tokens)
    while history.step <= limit:
        dists = [expert_next_token_dist(fleet[m], prompt, history.step, vocab_size) for m in gamma]
        fused = fuse_distributions(w, dists)
        if rng is None:
            token = fused.argmax()
        else:
            token = int(rng.choice(fused.vocab_size, p=fused.probs))
        history = history.extend(token)
        if config.stop_token is not None and token == config.stop_token:
            break
    T = len(history.generated)
    gate = 0.0 if theta is None else gate_delay
    return Answer(prompt.id, history.generated, tuple(gamma), tuple(float(x) for x in w),
                  cost_breakdown(prompt, gamma, fleet, gate, T),
                  cost_breakdown(prompt, mask, fleet, gate, T))


def score_accuracy(outputs, workload: Workload) -> float:
    """Fraction of prompts whose generated tokens match the target answer exactly."""
    seqs = [o.tokens if isinstance(o, Answer) else tuple(o) for o in outputs]
    if len(seqs) != len(workload):
        raise ValueError(f"{len(seqs)} outputs for {len(workload)} prompts")
    if not seqs:
        raise ValueError("nothing to score")
    return float(np.mean([tuple(int(t) for t in s) == p.answer for s, p in zip(seqs, workload)]))


# --------------------------------------------------------------------------
# batched greedy decoding over precomputed expert outputs
# --------------------------------------------------------------------------

def routing_weights(theta: GatingParams | None, S, X: np.ndarray, k: int | None, n: int) -> np.ndarray:
    """(P, N) weight matrix: top-k gating within ``S``, or uniform over ``S`` when ``theta`` is None."""
    mask = as_mask(S, n).require_nonempty()
    W = np.zeros((X.shape[0], n))
    if theta is None:
        W[:, mask.as_array()] = 1.0 / len(mask)
        return W
    kk = len(mask) if k is None else k
    G = positive_scores(gating_forward(theta, X))
    for i, g in enumerate(G):
        gamma = top_k_from_scores(g, mask, kk)
        W[i, gamma] = normalize_weights(g, gamma)[gamma]
    return W


def greedy_decode_batch(outputs: ExpertOutputs, W: np.ndarray) -> np.ndarray:
    """Greedy tokens (P, T_max) for per-prompt weights ``W``; padded steps are -1.

    Equivalent to ``generate_answer`` in greedy mode because expert
    distributions depend only on the prompt and position.
    """
    fused = np.einsum("ptnv,pn->ptv", outputs.dists, W)
    return np.where(outputs.mask, fused.argmax(axis=2), -1)


def batch_accuracy(outputs: ExpertOutputs, W: np.ndarray) -> float:
    tokens = greedy_decode_batch(outputs, W)
    hit = np.all((tokens == outputs.answers) | ~outputs.mask, axis=1)
    return float(hit.mean())
