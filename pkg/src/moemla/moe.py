"""Fine-grained mixture of experts with shared experts and top-k routing.

Routing adds a non-learned per-expert bias to the router logits. The bias
lives in ``RouterState`` as a plain numpy array, never as a ``Tensor``, so
no gradient can reach it; it is adjusted between steps by
``balancer_update``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError
from .tensor import Tensor, flop_scope, gelu, matmul, scatter_rows, softmax, take_along_last

STRATEGIES = ("none", "bias-diff", "bias-ratio", "aux-loss")


@dataclass(frozen=True)
class ExpertConfig:
    n_experts: int = 64
    n_shared: int = 2
    top_k: int = 6
    expert_hidden: int | None = None  # defaults to d, i.e. a quarter of a 4d FFN

    def __post_init__(self):
        if self.n_shared < 0 or self.n_experts <= self.n_shared:
            raise ConfigurationError(
                f"need 0 <= n_shared < n_experts, got n_shared={self.n_shared}, n_experts={self.n_experts}"
            )
        if not 1 <= self.top_k <= self.n_routed:
            raise ConfigurationError(f"top_k={self.top_k} must lie in [1, {self.n_routed}]")

    @property
    def n_routed(self) -> int:
        return self.n_experts - self.n_shared

    def hidden(self, d_model: int) -> int:
        return self.expert_hidden if self.expert_hidden is not None else d_model


@dataclass
class RouterState:
    """Out-of-graph balancing state for one MoE layer."""

    n_routed: int
    strategy: str = "bias-diff"
    gamma: float = 1e-3
    alpha: float = 0.01
    bias: np.ndarray = field(default=None)
    loads: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown balancing strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.bias is None:
            self.bias = np.zeros(self.n_routed, dtype=np.float64)
        if self.loads is None:
            self.loads = np.zeros(self.n_routed, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "n_routed": self.n_routed,
            "strategy": self.strategy,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "bias": self.bias.tolist(),
            "loads": self.loads.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RouterState:
        return cls(d["n_routed"], d["strategy"], d["gamma"], d["alpha"],
                   np.asarray(d["bias"], dtype=np.float64), np.asarray(d["loads"], dtype=np.float64))


@dataclass
class ExpertWeights:
    """Router matrix plus per-expert FFN weights; experts ``[0, n_shared)`` are shared."""

    w_gate: Tensor  # [d, n_routed]
    w_in: list[Tensor]  # each [d, hidden]
    w_out: list[Tensor]  # each [hidden, d]
    n_shared: int

    @property
    def n_experts(self) -> int:
        return len(self.w_in)

    @property
    def n_routed(self) -> int:
        return self.n_experts - self.n_shared


@dataclass
class RoutingDecision:
    indices: np.ndarray  # [n, k] routed-expert ids (0-based among routed experts)
    gates: Tensor  # [n, k], rows sum to 1
    probs: Tensor  # [n, n_routed]

    @property
    def loads(self) -> np.ndarray:
        return expert_loads(self.indices, self.probs.shape[-1])


def expert_loads(indices: np.ndarray, n_routed: int) -> np.ndarray:
    """Fraction of routed token-slots that landed on each expert."""
    counts = np.bincount(np.asarray(indices).ravel(), minlength=n_routed).astype(np.float64)
    total = counts.sum()
    return counts / total if total else counts


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Largest-``k`` column ids per row, ties resolved towards the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def route(x: Tensor, state: RouterState, weights: ExpertWeights, k: int,
          frozen_indices: np.ndarray | None = None, gate_from_bias: bool = True) -> RoutingDecision:
    """Select ``k`` routed experts per token and compute renormalised gates.

    Logits are ``x @ W_g + b``. Selection always uses the biased
    probabilities. Gates come from the same biased probabilities unless
    ``gate_from_bias`` is false. ``frozen_indices`` replaces the top-k
    selection (used to keep routing fixed during finite-difference checks).
    """
    if not 1 <= k <= weights.n_routed:
        raise ConfigurationError(f"top_k={k} must lie in [1, {weights.n_routed}]")
    with flop_scope("moe.router"):
        raw = matmul(x, weights.w_gate)
    bias = state.bias.astype(x.dtype)
    probs = softmax(raw + Tensor(bias), axis=-1)
    if frozen_indices is not None:
        indices = np.asarray(frozen_indices)
    else:
        indices = top_k_indices(probs.data, k)
    gate_src = probs if gate_from_bias else softmax(raw, axis=-1)
    picked = take_along_last(gate_src, indices)
    gates = picked / picked.sum(axis=-1, keepdims=True)
    return RoutingDecision(indices, gates, probs)


def expert_ffn(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, w_in)), w_out)


def moe_forward(x: Tensor, weights: ExpertWeights, decision: RoutingDecision) -> Tensor:
    """Shared experts (weight 1) plus the gate-weighted selected routed experts.

    ``x`` is ``[n, d]``; tokens are processed independently.
    """
    n = x.shape[0]
    y = None
    with flop_scope("moe.shared"):
        for s in range(weights.n_shared):
            out = expert_ffn(x, weights.w_in[s], weights.w_out[s])
            y = out if y is None else y + out
    with flop_scope("moe.routed"):
        for e in range(weights.n_routed):
            rows, slots = np.nonzero(decision.indices == e)
            if rows.size == 0:
                continue
            expert = weights.n_shared + e
            out = expert_ffn(x[rows], weights.w_in[expert], weights.w_out[expert])
            gate = decision.gates[rows, slots].reshape(-1, 1)
            contrib = scatter_rows(out * gate, rows, n)
            y = contrib if y is None else y + contrib
    if y is None:
        y = Tensor(np.zeros_like(x.data))
    return y


def balancer_update(state: RouterState, loads: np.ndarray) -> RouterState:
    """Adjust the routing bias from the loads of the batch just routed.

    ``bias-diff`` subtracts ``gamma*(f_i - 1/N_r)``; ``bias-ratio`` subtracts
    ``gamma*(f_i/f_mean - 1)`` with ``f_mean = 1/N_r``. Other strategies leave
    the bias alone. Loads are recorded in every case.
    """
    loads = np.asarray(loads, dtype=np.float64)
    target = 1.0 / state.n_routed
    if state.strategy == "bias-diff":
        state.bias = state.bias - state.gamma * (loads - target)
    elif state.strategy == "bias-ratio":
        state.bias = state.bias - state.gamma * (loads / target - 1.0)
    state.loads = loads.copy()
    return state


def aux_balance_loss(probs: Tensor, loads: np.ndarray, alpha: float) -> Tensor:
    """``alpha * N_r * sum_i f_i * mean_prob_i`` (Switch-Transformer surrogate).

    Loads are treated as constants; the gradient flows through the mean
    router probabilities only.
    """
    n_routed = probs.shape[-1]
    mean_prob = probs.reshape(-1, n_routed).mean(axis=0)
    f = Tensor(np.asarray(loads, dtype=probs.dtype))
    return (mean_prob * f).sum() * float(alpha * n_routed)


def load_cv(loads) -> float:
    """Coefficient of variation (population std over mean) of expert loads."""
    f = np.asarray(loads, dtype=np.float64)
    if f.size == 0:
        raise ValueError("load_cv needs at least one expert load")
    m = f.mean()
    if m == 0:
        raise ValueError("load_cv is undefined for all-zero loads")
    return float(f.std() / m)


def routing_combinations(n_routed: int, k: int) -> int:
    """Number of distinct top-k expert sets, ``C(n_routed, k)``, as an exact integer.

    ``routing_combinations(62, 6)`` is 61,474,519. The figure 36,288,252 that
    is sometimes quoted for 62 routed experts choosing 6 is ``C(57, 6)``.
    """
    if not 0 <= k <= n_routed:
        raise ValueError(f"need 0 <= k <= n_routed, got k={k}, n_routed={n_routed}")
    return math.comb(n_routed, k)


def combination_entropy(indices: np.ndarray) -> float:
    """Shannon entropy (bits) of the empirical distribution over selected expert sets."""
    keys = [tuple(sorted(row)) for row in np.asarray(indices).tolist()]
    if not keys:
        return 0.0
    _, counts = np.unique(np.array(keys), axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def route_record(step: int, layer: int, state: RouterState) -> str:
    """One JSON-lines route statistics record."""
    return json.dumps({
        "step": step,
        "layer": layer,
        "loads": state.loads.tolist(),
        "cv": load_cv(state.loads) if state.loads.sum() > 0 else None,
        "bias_min": float(state.bias.min()),
        "bias_max": float(state.bias.max()),
    })
