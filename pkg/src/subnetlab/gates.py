"""Hard concrete gates, expected sparsity and the Lagrangian sparsity controller.

A gate with parameter ``log_alpha`` is sampled as::

    u ~ Uniform(eps, 1 - eps)
    s = sigmoid((log(u / (1 - u)) + log_alpha) / beta)
    z = clamp(s * (r - l) + l, 0, 1)

With ``l < 0 < 1 < r`` the clamp puts finite probability mass on exactly
0 and exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA = 2.0 / 3.0
LOWER = -0.1
UPPER = 1.1
EPS = 1e-6
THRESHOLD_GRID = np.round(np.arange(0, 21) * 0.05, 10)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class GateSet:
    """One learnable ``log_alpha`` per maskable component."""

    log_alpha: Tensor
    param_weight: np.ndarray
    names: list[str] = field(default_factory=list)
    beta: float = BETA
    l: float = LOWER
    r: float = UPPER
    eps: float = EPS

    def __post_init__(self):
        self.param_weight = np.asarray(self.param_weight, dtype=np.float64)
        if not (self.l < 0 < 1 < self.r):
            raise ValueError(f"stretch interval must satisfy l < 0 < 1 < r, got ({self.l}, {self.r})")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.param_weight.shape != self.log_alpha.shape or self.log_alpha.ndim != 1:
            raise ValueError("log_alpha and param_weight must be 1-D and aligned")
        if np.any(self.param_weight <= 0):
            raise ValueError("param_weight entries must be positive")
        if not self.names:
            self.names = [str(i) for i in range(len(self))]

    def __len__(self) -> int:
        return int(self.log_alpha.shape[0])

    @classmethod
    def create(cls, param_weight, names=None, init: float | np.ndarray = 0.0, **kw) -> "GateSet":
        w = np.asarray(param_weight, dtype=np.float64)
        data = np.broadcast_to(np.asarray(init, dtype=np.float64), w.shape).copy()
        return cls(Tensor(data, requires_grad=True, name="log_alpha"), w, list(names or []), **kw)

    def values(self) -> np.ndarray:
        return self.log_alpha.data


# ---------------------------------------------------------------------------
# Scalar reference forms
# ---------------------------------------------------------------------------


def sample_gate(log_alpha: float, u: float, beta: float = BETA, l: float = LOWER,
                r: float = UPPER) -> float:
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie strictly inside (0, 1), got {u}")
    s = _sigmoid((math.log(u / (1.0 - u)) + log_alpha) / beta)
    return min(1.0, max(0.0, s * (r - l) + l))


def eval_gate(log_alpha: float, l: float = LOWER, r: float = UPPER) -> float:
    return min(1.0, max(0.0, _sigmoid(log_alpha) * (r - l) + l))


def prob_nonzero(log_alpha: float, beta: float = BETA, l: float = LOWER,
                 r: float = UPPER) -> float:
    """P(z > 0) = sigmoid(log_alpha - beta * log(-l / r))."""
    return _sigmoid(log_alpha - beta * math.log(-l / r))


def prob_one(log_alpha: float, beta: float = BETA, l: float = LOWER, r: float = UPPER) -> float:
    """P(z = 1) = sigmoid(log_alpha - beta * log((1 - l) / (r - 1)))."""
    return _sigmoid(log_alpha - beta * math.log((1.0 - l) / (r - 1.0)))


# ---------------------------------------------------------------------------
# Vectorised, differentiable forms
# ---------------------------------------------------------------------------


def uniform_draws(n: int, seed: int, step: int, eps: float = EPS) -> np.ndarray:
    """Counter-based stream: the draws depend only on (seed, step), entry i per component i."""
    counter = np.array([0, step, 0, 0], dtype=np.uint64)  # step in the high word: no overlap
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=counter))
    return rng.uniform(eps, 1.0 - eps, size=n)


def sample_gates(gates: GateSet, u: np.ndarray) -> Tensor:
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("u must lie strictly inside (0, 1)")
    noise = Tensor(np.log(u) - np.log1p(-u))
    s = T.sigmoid((gates.log_alpha + noise) * (1.0 / gates.beta))
    return T.clamp(s * (gates.r - gates.l) + gates.l, 0.0, 1.0)


def deterministic_gates(gates: GateSet) -> np.ndarray:
    """Eval-time gate values for every component."""
    s = T.sigmoid_array(gates.log_alpha.data)
    return np.clip(s * (gates.r - gates.l) + gates.l, 0.0, 1.0)


def prob_nonzero_tensor(gates: GateSet) -> Tensor:
    shift = gates.beta * math.log(-gates.l / gates.r)
    return T.sigmoid(gates.log_alpha - shift)


def expected_sparsity(gates: GateSet) -> Tensor:
    """Parameter-weighted expected pruned fraction, sum w (1 - P(z>0)) / sum w."""
    if len(gates) == 0:
        raise ValueError("expected_sparsity needs a nonempty gate set")
    w = gates.param_weight / gates.param_weight.sum()
    return T.sum_((1.0 - prob_nonzero_tensor(gates)) * Tensor(w))


# ---------------------------------------------------------------------------
# Lagrangian controller and schedule
# ---------------------------------------------------------------------------


@dataclass
class LagrangianState:
    lambda1: float = 0.0
    lambda2: float = 0.0
    target: float = 0.0
    final_target: float = 0.5
    warmup_steps: int = 0
    lr_lambda: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0.0 <= self.target <= self.final_target + 1e-12:
            raise ValueError("target must lie in [0, final_target]")


def lagrangian_penalty(t, state: LagrangianState):
    """``lambda1 (t - s) + lambda2 (t - s)^2``; ``t`` may be a Tensor."""
    gap = t - state.target
    return gap * state.lambda1 + gap * gap * state.lambda2


def lagrangian_update(state: LagrangianState, t: float) -> LagrangianState:
    """Gradient ascent on both multipliers (the penalty is linear in each)."""
    gap = float(t) - state.target
    state.lambda1 += state.lr_lambda * gap
    state.lambda2 += state.lr_lambda * gap * gap
    return state


def target_schedule(step: int, warmup_steps: int, final_target: float) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps == 0:
        return final_target
    return min(final_target, final_target * step / warmup_steps)


# ---------------------------------------------------------------------------
# Discretisation
# ---------------------------------------------------------------------------


@dataclass
class Subnetwork:
    keep: np.ndarray
    param_weight: np.ndarray
    names: list[str] = field(default_factory=list)
    seed: int | None = None
    target_sparsity: float | None = None
    threshold: float | None = None

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        self.param_weight = np.asarray(self.param_weight, dtype=np.float64)
        if self.keep.shape != self.param_weight.shape:
            raise ValueError("keep and param_weight must be aligned")

    @property
    def sparsity(self) -> float:
        return subnetwork_sparsity(self.keep, self.param_weight)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "keep": [int(k) for k in self.keep],
            "param_weight": [float(w) for w in self.param_weight],
            "sparsity": self.sparsity,
            "seed": self.seed,
            "target_sparsity": self.target_sparsity,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Subnetwork":
        return cls(np.array(d["keep"], dtype=bool), np.array(d["param_weight"]),
                   list(d.get("names", [])), d.get("seed"), d.get("target_sparsity"),
                   d.get("threshold"))


def subnetwork_sparsity(keep: np.ndarray, weight: np.ndarray) -> float:
    keep = np.asarray(keep, dtype=bool)
    weight = np.asarray(weight, dtype=np.float64)
    return float(weight[~keep].sum() / weight.sum())


def discretize(gates: GateSet, threshold: float) -> Subnetwork:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    keep = deterministic_gates(gates) >= threshold
    return Subnetwork(keep, gates.param_weight.copy(), list(gates.names), threshold=threshold)


def choose_threshold(gates: GateSet, target: float, grid=THRESHOLD_GRID) -> float:
    """Grid threshold whose subnetwork sparsity is closest to ``target``; ties go low."""
    z = deterministic_gates(gates)
    best, best_gap = None, math.inf
    for thr in grid:
        gap = abs(subnetwork_sparsity(z >= thr, gates.param_weight) - target)
        if gap < best_gap - 1e-12:
            best, best_gap = float(thr), gap
    return best
