"""Gating network, weight normalisation, fusion, ensemble loss and training.

Raw scores come from a small leaky-ReLU MLP. They are mapped to positive
scores with a clamped exp and renormalised over whichever expert subset is
in play, so the weights over a subset are a softmax restricted to it.

Training losses are teacher forced: step t is scored against the true
prefix, and gating weights are computed once per prompt.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .domain import (
    ExpertProfile,
    Prompt,
    VocabDistribution,
    Workload,
    as_mask,
    check_distribution,
    seeded_rng,
)
from .synth import ExpertOutputs, expert_next_token_dist, expert_outputs

log = logging.getLogger(__name__)

SCORE_CLAMP = 30.0
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GatingParams:
    """MLP weights. ``weights[i]`` has shape (fan_in, fan_out); the last entry is the output layer.

    With ``residual`` set, the output layer reads the concatenation of the
    input and every hidden activation.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    negative_slope: float = 0.25
    residual: bool = True
    output_activation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        d = self.weights[0].shape[0]
        fan_in, concat = d, d
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            last = i == len(self.weights) - 1
            expected_in = concat if (last and self.residual) else fan_in
            if w.ndim != 2 or w.shape[0] != expected_in:
                raise ValueError(f"layer {i}: weight shape {w.shape} does not chain (fan_in {expected_in})")
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match {w.shape}")
            fan_in = w.shape[1]
            concat += w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "GatingParams":
        return replace(self, weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "GatingParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape))
            i += a.size
        return self.with_arrays(out)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": "gating",
            "negative_slope": self.negative_slope,
            "residual": self.residual,
            "output_activation": self.output_activation,
            "layers": [{"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GatingParams":
        if d.get("kind") != "gating" or d.get("schema_version") != 1:
            raise ValueError("not a version-1 gating document")
        ws = tuple(np.array(l["weight"], dtype=float).reshape(l["shape"]) for l in d["layers"])
        bs = tuple(np.array(l["bias"], dtype=float) for l in d["layers"])
        return cls(ws, bs, d["negative_slope"], d["residual"], d.get("output_activation", False))


def init_gating(input_dim: int, hidden_dims: Sequence[int], n_experts: int, rng: np.random.Generator,
                negative_slope: float = 0.25, residual: bool = True,
                output_scale: float = 0.1) -> GatingParams:
    """He-initialised hidden layers, small output layer so initial weights start near uniform."""
    ws, bs = [], []
    fan_in, concat = input_dim, input_dim
    for h in hidden_dims:
        gain = np.sqrt(2.0 / (1.0 + negative_slope ** 2))
        ws.append(rng.standard_normal((fan_in, h)) * gain / np.sqrt(fan_in))
        bs.append(np.zeros(h))
        fan_in = h
        concat += h
    out_in = concat if residual else fan_in
    ws.append(rng.standard_normal((out_in, n_experts)) * output_scale / np.sqrt(out_in))
    bs.append(np.zeros(n_experts))
    return GatingParams(tuple(ws), tuple(bs), negative_slope, residual)


# --------------------------------------------------------------------------
# forward / weights / fusion
# --------------------------------------------------------------------------

def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _forward(theta: GatingParams, X: np.ndarray, dropout_masks=None):
    acts = [X]
    pre = []
    for i, (w, b) in enumerate(zip(theta.weights[:-1], theta.biases[:-1])):
        z = acts[-1] @ w + b
        h = _leaky(z, theta.negative_slope)
        if dropout_masks is not None:
            h = h * dropout_masks[i]
        pre.append(z)
        acts.append(h)
    u = np.concatenate(acts, axis=1) if theta.residual else acts[-1]
    raw = u @ theta.weights[-1] + theta.biases[-1]
    if theta.output_activation:
        pre.append(raw)
        raw = _leaky(raw, theta.negative_slope)
    return raw, (acts, pre, u)


def gating_forward(theta: GatingParams, x) -> np.ndarray:
    """Raw gating scores for one embedding (shape (d,)) or a batch (shape (B, d))."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != theta.input_dim:
        raise ValueError(f"expected embeddings of dimension {theta.input_dim}, got shape {x.shape}")
    raw, _ = _forward(theta, X)
    return raw[0] if single else raw


def positive_scores(raw) -> np.ndarray:
    """Elementwise exp of raw scores clamped to [-30, 30]."""
    return np.exp(np.clip(np.asarray(raw, dtype=float), -SCORE_CLAMP, SCORE_CLAMP))


def normalize_weights(g, S) -> np.ndarray:
    """Renormalise positive scores over subset ``S``.

    Works on a single score vector or a (B, N) batch. The result has the
    same shape as ``g`` with zeros outside ``S``.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[-1]
    sel = as_mask(S, n).as_array()
    if not sel.any():
        raise ValueError("expert subset must be nonempty")
    if np.any(g[..., sel] <= 0):
        raise ValueError("scores must be strictly positive on the subset")
    gs = np.where(sel, g, 0.0)
    return gs / gs.sum(axis=-1, keepdims=True)


def fuse_distributions(weights, dists) -> VocabDistribution:
    """Weighted mixture of expert distributions; ``weights[i]`` pairs with ``dists[i]``."""
    w = np.asarray(weights, dtype=float)
    D = np.array([d.probs if isinstance(d, VocabDistribution) else np.asarray(d, dtype=float)
                  for d in dists])
    if w.ndim != 1 or D.ndim != 2 or w.size != D.shape[0]:
        raise ValueError(f"{w.size} weights for {D.shape[0]} distributions")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    for row in D:
        check_distribution(row)
    return VocabDistribution(w @ D)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def ensemble_nll(weights, target_probs) -> float:
    """-sum_t log(sum_n w_n f_{n,y_t}); ``target_probs`` is (T, N) and ``weights`` (N,)."""
    q = np.asarray(target_probs, dtype=float) @ np.asarray(weights, dtype=float)
    return float(-np.log(np.maximum(q, PROB_FLOOR)).sum())


@dataclass(frozen=True, eq=False)
class GatingDataset:
    """Embeddings plus the teacher-forced target probabilities of every expert.

    ``target`` is (P, T_max, N) with f_{n, y_t} for each prompt and step;
    padded steps are masked out.
    """

    X: np.ndarray
    target: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if len(self.X) == 0:
            raise ValueError("dataset is empty")
        if not (self.X.shape[0] == self.target.shape[0] == self.mask.shape[0]):
            raise ValueError("dataset arrays disagree on the number of prompts")

    @classmethod
    def build(cls, workload: Workload, fleet: Sequence[ExpertProfile] | None = None,
              outputs: ExpertOutputs | None = None) -> "GatingDataset":
        if outputs is None:
            outputs = expert_outputs(fleet, workload)
        return cls(workload.embeddings(), outputs.target, outputs.mask)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_experts(self) -> int:
        return self.target.shape[2]

    def batch(self, idx) -> "GatingDataset":
        idx = np.asarray(idx, dtype=int)
        return GatingDataset(self.X[idx], self.target[idx], self.mask[idx])

    def prompt_targets(self, i: int) -> np.ndarray:
        """(T_i, N) target probabilities of prompt ``i``."""
        return self.target[i][self.mask[i]]


def prompt_target_probs(prompt: Prompt, fleet: Sequence[ExpertProfile], vocab_size: int) -> np.ndarray:
    """(T, N) table of f_{n, y_t} computed one distribution at a time."""
    return np.array([[expert_next_token_dist(e, prompt, t, vocab_size)[prompt.answer[t - 1]]
                      for e in fleet] for t in range(1, prompt.answer_length + 1)])


def _per_prompt_losses(weights: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    q = np.einsum("ptn,pn->pt", target, weights)
    return -np.where(mask, np.log(np.maximum(q, PROB_FLOOR)), 0.0).sum(axis=1)


def sequence_loss(theta: GatingParams, S, x, target_probs) -> float:
    """Teacher-forced ensemble loss of one prompt; ``target_probs`` is its (T, N) table."""
    S = as_mask(S, theta.output_dim).require_nonempty()
    w = normalize_weights(positive_scores(gating_forward(theta, x)), S)
    return ensemble_nll(w, target_probs)


def subset_weights(theta: GatingParams, S, X: np.ndarray) -> np.ndarray:
    S = as_mask(S, theta.output_dim).require_nonempty()
    return normalize_weights(positive_scores(gating_forward(theta, X)), S)


def prompt_losses(theta: GatingParams, S, data: GatingDataset) -> np.ndarray:
    return _per_prompt_losses(subset_weights(theta, S, data.X), data.target, data.mask)


def empirical_loss(theta: GatingParams, S, data: GatingDataset) -> float:
    """Mean teacher-forced sequence loss over the dataset."""
    return float(prompt_losses(theta, S, data).mean())


def _loss_and_grad(theta: GatingParams, S, data: GatingDataset, rng: np.random.Generator | None = None,
                   dropout: float = 0.0, sel: np.ndarray | None = None):
    # sel, when given, is a (B, N) per-sample subset that overrides S
    if sel is None:
        sel = as_mask(S, theta.output_dim).require_nonempty().as_array()
    X = data.X
    masks = None
    if dropout > 0 and rng is not None:
        masks = [(rng.random((X.shape[0], h)) >= dropout) / (1.0 - dropout) for h in theta.hidden_dims]
    raw, (acts, pre, u) = _forward(theta, X, masks)
    inside = (raw > -SCORE_CLAMP) & (raw < SCORE_CLAMP)
    g = np.where(sel, np.exp(np.clip(raw, -SCORE_CLAMP, SCORE_CLAMP)), 0.0)
    w = g / g.sum(axis=1, keepdims=True)
    q = np.einsum("ptn,pn->pt", data.target, w)
    live = data.mask & (q > PROB_FLOOR)
    losses = -np.where(data.mask, np.log(np.maximum(q, PROB_FLOOR)), 0.0).sum(axis=1)
    B = X.shape[0]
    # d loss / d w_n, then through the restricted softmax
    dw = -np.einsum("ptn,pt->pn", data.target, np.where(live, 1.0 / np.where(live, q, 1.0), 0.0))
    dz = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    draw = dz * inside / B

    grads_w = [None] * len(theta.weights)
    grads_b = [None] * len(theta.weights)
    if theta.output_activation:
        z_out = pre[-1]
        draw = draw * np.where(z_out > 0, 1.0, theta.negative_slope)
    grads_w[-1] = u.T @ draw
    grads_b[-1] = draw.sum(axis=0)
    du = draw @ theta.weights[-1].T
    L = len(theta.weights) - 1
    if theta.residual:
        sizes = [a.shape[1] for a in acts]
        da = list(np.split(du, np.cumsum(sizes)[:-1], axis=1))
    else:
        da = [np.zeros_like(a) for a in acts[:-1]] + [du]
    for l in range(L - 1, -1, -1):
        upstream = da[l + 1]
        if masks is not None:
            upstream = upstream * masks[l]
        dz_l = upstream * np.where(pre[l] > 0, 1.0, theta.negative_slope)
        grads_w[l] = acts[l].T @ dz_l
        grads_b[l] = dz_l.sum(axis=0)
        da[l] = da[l] + dz_l @ theta.weights[l].T
    grad = replace(theta, weights=tuple(grads_w), biases=tuple(grads_b))
    return float(losses.mean()), grad


def loss_gradient(theta: GatingParams, S, batch: GatingDataset) -> GatingParams:
    """Exact gradient of the batch-mean loss, returned in the shape of ``theta``."""
    return _loss_and_grad(theta, S, batch)[1]


def measure_gate_delay(theta: GatingParams, X: np.ndarray, repeats: int = 50) -> float:
    """Mean wall-clock seconds of one single-prompt forward pass."""
    X = np.atleast_2d(X)
    start = time.perf_counter()
    for i in range(repeats):
        gating_forward(theta, X[i % len(X)])
    return (time.perf_counter() - start) / repeats


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 40
    grad_clip: float = 1.0
    lr_decay_factor: float = 0.8
    lr_decay_patience: int = 3
    seed: int = 0
    hidden_dims: tuple[int, ...] = (32, 32)
    negative_slope: float = 0.25
    residual: bool = True
    dropout: float = 0.0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    output_scale: float = 0.1
    # probability of hiding each expert from a training sample's subset
    subset_dropout: float = 0.0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size >= 1 and self.epochs >= 0
                and self.grad_clip > 0 and 0 < self.lr_decay_factor <= 1
                and self.lr_decay_patience >= 1):
            raise ValueError("training rates and sizes must be positive")
        if not 0 <= self.dropout < 1 or not 0 <= self.subset_dropout < 1:
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    params: GatingParams
    initial_loss: float
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_gating(data: GatingDataset, config: TrainConfig = TrainConfig(), subset=None,
                 init: GatingParams | None = None) -> TrainResult:
    """Mini-batch descent on the empirical loss over ``subset`` (default: all experts).

    With ``subset_dropout`` each sample sees a random sub-subset, which
    teaches the gate a sensible ranking when its preferred experts are
    unavailable. Adam (or plain SGD) with global-norm gradient clipping; the learning rate
    is multiplied by ``lr_decay_factor`` whenever the full-data loss has not
    improved for ``lr_decay_patience`` epochs. The parameters with the lowest
    full-data loss seen (initial point included) are returned.
    """
    N = data.n_experts
    S = as_mask(subset if subset is not None else (1 << N) - 1, N).require_nonempty()
    rng = seeded_rng(config.seed)
    theta = init if init is not None else init_gating(
        data.X.shape[1], config.hidden_dims, N, rng, config.negative_slope,
        config.residual, config.output_scale)
    arrays = [a.copy() for a in theta.arrays()]
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    b1, b2, eps = 0.9, 0.999, 1e-8

    lr = config.learning_rate
    init_loss = empirical_loss(theta, S, data)
    if not np.isfinite(init_loss):
        raise TrainingDiverged(f"initial loss is {init_loss}")
    best_loss, best = init_loss, theta
    plateau_ref, stale = init_loss, 0
    result = TrainResult(theta, init_loss, init_loss, [init_loss])
    step = 0
    P = len(data)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(P)
        for start in range(0, P, config.batch_size):
            batch = data.batch(order[start:start + config.batch_size])
            sel = None
            if config.subset_dropout > 0:
                base = S.as_array()
                sel = base & (rng.random((len(batch), N)) >= config.subset_dropout)
                empty = ~sel.any(axis=1)
                sel[empty] = base
            loss, grad = _loss_and_grad(theta, S, batch, rng, config.dropout, sel)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite batch loss at epoch {epoch}, step {step}")
            result.step_losses.append(loss)
            g = grad.arrays()
            norm = np.sqrt(sum(float((x ** 2).sum()) for x in g))
            if norm > config.grad_clip:
                g = [x * (config.grad_clip / norm) for x in g]
            step += 1
            for i, gi in enumerate(g):
                if config.weight_decay:
                    arrays[i] -= lr * config.weight_decay * arrays[i]
                if config.optimizer == "adam":
                    m[i] = b1 * m[i] + (1 - b1) * gi
                    v[i] = b2 * v[i] + (1 - b2) * gi * gi
                    mhat = m[i] / (1 - b1 ** step)
                    vhat = v[i] / (1 - b2 ** step)
                    arrays[i] -= lr * mhat / (np.sqrt(vhat) + eps)
                else:
                    arrays[i] -= lr * gi
            theta = theta.with_arrays([a.copy() for a in arrays])
        epoch_loss = empirical_loss(theta, S, data)
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        result.epoch_losses.append(epoch_loss)
        result.learning_rates.append(lr)
        if epoch_loss < best_loss:
            best_loss, best, result.best_epoch = epoch_loss, theta, epoch
        if epoch_loss < plateau_ref - 1e-4 * abs(plateau_ref):
            plateau_ref, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= config.lr_decay_patience:
                lr *= config.lr_decay_factor
                stale = 0
        log.debug("epoch %d loss %.6f lr %.3g", epoch, epoch_loss, lr)
    result.params = best
    result.final_loss = best_loss
    return result


# --------------------------------------------------------------------------
# tabular (infinite-capacity) gating
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularGating:
    """Free positive score vector per prompt, indexed by row."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 2 or np.any(~(s > 0)):
            raise ValueError("tabular scores must be a (P, N) array of positive numbers")
        object.__setattr__(self, "scores", s)

    def weights(self, S) -> np.ndarray:
        return normalize_weights(self.scores, S)

    def empirical_loss(self, S, data: GatingDataset) -> float:
        return float(_per_prompt_losses(self.weights(S), data.target, data.mask).mean())


def optimal_simplex_weights(target_probs, tol: float = 1e-13, max_iter: int = 500) -> np.ndarray:
    """Minimise -sum_t log(P_t . w) over the probability simplex.

    ``target_probs`` is (T, m) with positive entries. Active-set damped
    Newton on the face of currently positive weights, starting from uniform.
    Newton steps are minimum-norm, so directions that leave every P_t . w
    unchanged are never taken and ties resolve toward the uniform start.
    Zero-weight experts that violate the optimality condition
    (sum_t P_tn / q_t <= T) are brought back with a Frank-Wolfe step.
    """
    P = np.asarray(target_probs, dtype=float)
    if P.ndim != 2 or P.shape[1] == 0:
        raise ValueError("target_probs must be (T, m) with m >= 1")
    T, m = P.shape
    if m == 1:
        return np.ones(1)
    w = np.full(m, 1.0 / m)
    free = np.ones(m, dtype=bool)

    def phi(x):
        q = P @ x
        return np.inf if np.any(q <= 0) else -np.log(q).sum()

    for _ in range(max_iter):
        q = P @ w
        R = P / q[:, None]
        r = R.sum(axis=0)                      # -gradient
        F = np.flatnonzero(free)
        k = F.size
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = R[:, F].T @ R[:, F]
        K[:k, k] = 1.0
        K[k, :k] = 1.0
        rhs = np.concatenate([r[F], [0.0]])
        d = np.linalg.lstsq(K, rhs, rcond=None)[0][:k]
        decrement = float(r[F] @ d)
        if decrement <= tol:
            out = np.flatnonzero(~free)
            if out.size and r[out].max() > T * (1 + 1e-11):
                j = out[np.argmax(r[out])]
                w = _frank_wolfe_step(P, w, j)
                free[j] = w[j] > 0
                continue
            break
        neg = d < 0
        a_max = float(np.min(-w[F][neg] / d[neg])) if neg.any() else np.inf
        a = min(1.0, a_max)
        f0 = -np.log(q).sum()
        while a > 1e-16:
            cand = w.copy()
            cand[F] += a * d
            cand = np.maximum(cand, 0.0)
            if phi(cand) <= f0 - 1e-4 * a * decrement:
                break
            a *= 0.5
        else:
            break
        if a == a_max:
            blocking = F[neg][np.argmin(-w[F][neg] / d[neg])]
            cand[blocking] = 0.0
        w = cand / cand.sum()
        free = w > 0
    return w


def _frank_wolfe_step(P: np.ndarray, w: np.ndarray, j: int) -> np.ndarray:
    """Exact line search from ``w`` toward vertex ``j`` (1-D convex, Newton on the step)."""
    d = -w.copy()
    d[j] += 1.0
    Pd = P @ d
    a = 0.0
    for _ in range(100):
        q = P @ (w + a * d)
        g1 = -(Pd / q).sum()
        g2 = ((Pd / q) ** 2).sum()
        if g2 <= 0:
            break
        a_new = min(1.0, max(0.0, a - g1 / g2))
        if abs(a_new - a) < 1e-15:
            a = a_new
            break
        a = a_new
    if a <= 0:
        a = 1e-12
    out = w + a * d
    out = np.maximum(out, 0.0)
    return out / out.sum()


def tabular_optimal_weights(target_probs, S) -> np.ndarray:
    """Loss-minimising weights over ``S`` for one prompt's (T, N) target table; zeros outside ``S``."""
    P = np.asarray(target_probs, dtype=float)
    n = P.shape[1]
    members = as_mask(S, n).require_nonempty().members()
    w = np.zeros(n)
    w[members] = optimal_simplex_weights(P[:, members])
    return w


def tabular_optimal_loss(target_probs, S) -> float:
    return ensemble_nll(tabular_optimal_weights(target_probs, S), target_probs)


def tabular_subset_loss(data: GatingDataset, S) -> float:
    """Empirical loss of the per-prompt optimal weights on ``S`` (infinite-capacity optimum)."""
    return float(np.mean([tabular_optimal_loss(data.prompt_targets(i), S) for i in range(len(data))]))


def restricted_weights(weights, S) -> np.ndarray | None:
    """Restrict a weight vector to ``S`` and renormalise; None when it puts no mass on ``S``."""
    w = np.asarray(weights, dtype=float)
    sel = as_mask(S, w.size).require_nonempty().as_array()
    mass = w[sel].sum()
    if mass <= 0:
        return None
    return np.where(sel, w, 0.0) / mass
