"""Node classifier with per-node adaptive propagation depth.

A two-layer MLP produces class-logit seeds per node; the seeds are then
diffused over the graph, and a small sigmoid halting unit decides after
every step, per node, whether to keep propagating. Halted nodes freeze
their own state but keep transmitting it to neighbors. The states
visited along the way are combined into the final output using the
halting weights, and the per-node step cost (steps plus remainder) is
what the propagation penalty acts on.

Backward passes are explicit; the step counts and the case structure of
the halting weights are treated as constants of the forward pass, so
only the remainder carries penalty gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import _kernels
from .graph import GraphBundle, PropagationOperator, propagate, sample_edge_dropout


@dataclass
class HaltingConfig:
    """Knobs of the adaptive propagation loop.

    ``p_mode`` selects how the per-step combination weights are formed:
    "act" (default) assigns the halting value to every non-final step
    and the remainder to the final one, which makes the weights a
    proper distribution; "literal" uses the cumulative sum for
    non-final steps instead (kept for comparison, weights then do not
    sum to one).

    ``penalty_mode`` scales the propagation-cost term: "per_train_node"
    divides the summed cost by the training-mask size (keeping the
    data/penalty balance independent of graph size), "total" adds the
    raw sum.
    """

    max_steps: int = 10
    epsilon: float = 0.01
    alpha: float = 0.0
    p_mode: str = "act"
    penalty_mode: str = "per_train_node"

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.p_mode not in ("act", "literal"):
            raise ValueError(f"unknown p_mode {self.p_mode!r}")
        if self.penalty_mode not in ("per_train_node", "total"):
            raise ValueError(f"unknown penalty_mode {self.penalty_mode!r}")


@dataclass
class ModelParams:
    """All trainable tensors. ``w1..b2`` form the main group, the
    halting weight/bias the halting group; the two are optimized on
    alternating schedules."""

    w1: nn.ParamTensor
    b1: nn.ParamTensor
    w2: nn.ParamTensor
    b2: nn.ParamTensor
    halt_w: nn.ParamTensor   # (n_classes,)
    halt_b: nn.ParamTensor   # (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, d_features: int, n_classes: int,
             hidden: int = 64, l2_first_layer: float = 0.008,
             l2_include_bias: bool = False, dtype=np.float32) -> "ModelParams":
        """Glorot-uniform layer weights, zero biases, neutral halting unit
        (weights zero, so the initial halting value is 0.5 everywhere)."""
        dt = np.dtype(dtype)
        return cls(
            w1=nn.ParamTensor(nn.glorot_uniform(rng, d_features, hidden, dt),
                              l2=l2_first_layer),
            b1=nn.ParamTensor(np.zeros(hidden, dtype=dt),
                              l2=l2_first_layer if l2_include_bias else 0.0),
            w2=nn.ParamTensor(nn.glorot_uniform(rng, hidden, n_classes, dt)),
            b2=nn.ParamTensor(np.zeros(n_classes, dtype=dt)),
            halt_w=nn.ParamTensor(np.zeros(n_classes, dtype=dt)),
            halt_b=nn.ParamTensor(np.zeros(1, dtype=dt)),
        )

    def main_group(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def halting_group(self):
        return [self.halt_w, self.halt_b]

    def all_tensors(self):
        return self.main_group() + self.halting_group()

    def zero_grad(self):
        for p in self.all_tensors():
            p.zero_grad()

    @property
    def dtype(self):
        return self.w1.value.dtype

    def snapshot(self):
        return [p.snapshot() for p in self.all_tensors()]

    def restore(self, snap):
        for p, v in zip(self.all_tensors(), snap):
            p.restore(v)


class SeedFeatures:
    """Feature matrix prepared for the node-wise encoder.

    Bag-of-words features are mostly zeros, so the first affine layer
    runs on a CSR view (input dropout then only touches stored values);
    the transposed layout is precomputed for the weight gradient.
    """

    def __init__(self, dense: np.ndarray, dtype=np.float32):
        dense = np.asarray(dense)
        self.n, self.d = dense.shape
        self.dtype = np.dtype(dtype)
        rows, cols = np.nonzero(dense)
        self.indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.n), out=self.indptr[1:])
        self.indices = cols.astype(np.int32)
        self.values = dense[rows, cols].astype(self.dtype)
        # transpose layout: column-grouped view of the same entries
        order = np.argsort(self.indices, kind="stable")
        self.t_indptr = np.zeros(self.d + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.indices, minlength=self.d), out=self.t_indptr[1:])
        self.t_indices = rows[order].astype(np.int32)
        self.t_perm = order

    def matmul(self, values: np.ndarray, w: np.ndarray) -> np.ndarray:
        """(features with given stored values) @ w -> (n, w.shape[1])."""
        return _kernels.spmm(self.indptr, self.indices, values,
                             np.ascontiguousarray(w))

    def t_matmul(self, values: np.ndarray, g: np.ndarray) -> np.ndarray:
        """features.T @ g -> (d, g.shape[1]), reusing the forward values."""
        return _kernels.spmm(self.t_indptr, self.t_indices, values[self.t_perm],
                             np.ascontiguousarray(g))


@dataclass
class SeedCache:
    """Activations the seed backward pass needs."""
    x_values: np.ndarray
    hidden_pre: np.ndarray
    hidden_mask: Optional[np.ndarray]
    hidden_out: np.ndarray


def seed_forward(feats: SeedFeatures, params: ModelParams, train: bool,
                 dropout: float, rng: Optional[np.random.Generator]):
    """Node-wise encoder: dropout -> affine -> relu -> dropout -> affine."""
    if train and dropout > 0:
        keep = rng.random(feats.values.shape, dtype=np.float32) >= dropout
        x_values = feats.values * (keep.astype(feats.dtype)
                                   / feats.dtype.type(1.0 - dropout))
    else:
        x_values = feats.values
    hidden_pre = feats.matmul(x_values, params.w1.value) + params.b1.value
    hidden = nn.relu(hidden_pre)
    hidden, hidden_mask = nn.dropout_forward(hidden, dropout if train else 0.0,
                                             rng, train=train)
    z0 = nn.affine_forward(hidden, params.w2.value, params.b2.value)
    return z0, SeedCache(x_values, hidden_pre, hidden_mask, hidden)


def seed_backward(d_z0: np.ndarray, cache: SeedCache, feats: SeedFeatures,
                  params: ModelParams) -> None:
    """Accumulate encoder gradients into the parameter tensors."""
    d_hidden, d_w2, d_b2 = nn.affine_backward(d_z0, cache.hidden_out,
                                              params.w2.value)
    params.w2.grad += d_w2
    params.b2.grad += d_b2
    d_hidden = nn.dropout_backward(d_hidden, cache.hidden_mask)
    d_pre = nn.relu_backward(d_hidden, cache.hidden_pre)
    params.w1.grad += feats.t_matmul(cache.x_values, d_pre)
    params.b1.grad += d_pre.sum(axis=0)


def seed_embeddings(bundle: GraphBundle, params: ModelParams, mode: str = "eval",
                    rng: Optional[np.random.Generator] = None,
                    dropout: float = 0.5) -> np.ndarray:
    """Convenience wrapper producing the class-logit seeds for a bundle."""
    feats = SeedFeatures(bundle.features, dtype=params.dtype)
    z0, _ = seed_forward(feats, params, mode == "train", dropout, rng)
    return z0


def halting_probability(z_row: np.ndarray, params: ModelParams) -> float:
    """Stop probability for a single node state; strictly inside (0, 1)."""
    pre = float(z_row @ params.halt_w.value + params.halt_b.value[0])
    return float(nn.sigmoid(np.asarray(pre)))


@dataclass
class HaltingTrace:
    """Everything one adaptive forward pass produced, per node.

    ``states[k]`` is the full state matrix after k propagation steps
    (index 0 is the seed); only the first ``steps[i]`` entries of row i
    ever advance. ``halt_values``/``step_active`` are (max_step, n).
    """

    steps: np.ndarray              # int64, chosen step count per node
    remainder: np.ndarray          # float64
    halt_values: np.ndarray        # float64, value recorded at each step
    step_active: np.ndarray        # bool, node still propagating at step k
    states: list                   # [(n, C)] length max_step + 1
    op_values: list                # per-step operator values (None in eval)
    weights: np.ndarray            # float64 (max_step, n) combination weights
    combined: np.ndarray           # (n, C) final output
    p_mode: str

    @property
    def max_step(self) -> int:
        return self.halt_values.shape[0]

    @property
    def cost(self) -> np.ndarray:
        return self.steps + self.remainder


def halting_schedule(halt_values: np.ndarray, epsilon: float, max_steps: int):
    """Step budget and remainder implied by per-step halting values.

    ``halt_values`` is (n_steps, n); a node stops at the first step whose
    running sum reaches 1 - epsilon (ties stop), capped at ``max_steps``.
    Returns (steps, remainder) with remainder = 1 minus the sum of the
    values strictly before the stopping step.
    """
    n_steps, n = halt_values.shape
    threshold = 1.0 - epsilon
    cum = np.cumsum(halt_values, axis=0)
    reached = cum >= threshold
    first = np.where(reached.any(axis=0), reached.argmax(axis=0) + 1,
                     max_steps)
    steps = np.minimum(first, max_steps)
    before = np.where(steps > 1, cum[steps - 2, np.arange(n)], 0.0)
    return steps.astype(np.int64), 1.0 - before


def _combination_weights(p_mode, halt_values, step_active, steps, remainder):
    """Per-step weights; rows beyond a node's own step count are zero."""
    max_step, n = halt_values.shape
    k_index = np.arange(1, max_step + 1)[:, None]
    final = k_index == steps[None, :]
    if p_mode == "act":
        w = np.where(step_active & ~final, halt_values, 0.0)
    else:  # literal: cumulative halting sum on non-final steps
        total = (1.0 - remainder) + halt_values[steps - 1, np.arange(n)]
        w = np.where(step_active & ~final, total[None, :], 0.0)
    w = np.where(final, remainder[None, :], w)
    return w


def adaptive_forward(op: PropagationOperator, z0: np.ndarray, params: ModelParams,
                     cfg: HaltingConfig, train: bool = False,
                     rng: Optional[np.random.Generator] = None,
                     edge_dropout: float = 0.0):
    """Diffuse seeds with per-node halting; returns (combined, trace).

    In train mode the operator is dropout-resampled at every step. A
    node stops once its running halting sum reaches 1 - epsilon (ties
    stop) or the step cap is hit; stopped nodes keep their state but
    stay visible to neighbors.
    """
    n, _ = z0.shape
    threshold = 1.0 - cfg.epsilon

    states = [z0]
    op_values = []
    halt_rows = []
    active_rows = []
    steps = np.zeros(n, dtype=np.int64)
    remainder = np.ones(n, dtype=np.float64)
    cum = np.zeros(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)

    k = 0
    while k < cfg.max_steps and active.any():
        k += 1
        if train and edge_dropout > 0:
            op_k = sample_edge_dropout(op, edge_dropout, rng)
            op_values.append(op_k.values)
        else:
            op_k = op
            op_values.append(None)
        prop = propagate(op_k, states[-1])
        z_k = np.where(active[:, None], prop, states[-1])
        states.append(z_k)

        halt = nn.sigmoid(z_k @ params.halt_w.value
                          + params.halt_b.value[0]).astype(np.float64)
        halt_rows.append(np.where(active, halt, 0.0))
        active_rows.append(active.copy())

        stop_now = active & ((cum + halt >= threshold) | (k == cfg.max_steps))
        steps[stop_now] = k
        remainder[stop_now] = 1.0 - cum[stop_now]
        keep_going = active & ~stop_now
        cum[keep_going] += halt[keep_going]
        active = keep_going

    halt_values = np.stack(halt_rows)
    step_active = np.stack(active_rows)
    weights = _combination_weights(cfg.p_mode, halt_values, step_active,
                                   steps, remainder)

    combined = np.zeros_like(z0)
    inv_steps = (1.0 / steps).astype(z0.dtype)
    for kk in range(len(states) - 1):
        w = (weights[kk] * step_active[kk]).astype(z0.dtype)
        cw = ((1.0 - weights[kk]) * step_active[kk]).astype(z0.dtype)
        combined += w[:, None] * states[kk + 1] + cw[:, None] * states[kk]
    combined *= inv_steps[:, None]

    if not np.all(np.isfinite(combined)):
        raise nn.DivergenceError("non-finite propagation state")

    trace = HaltingTrace(steps=steps, remainder=remainder, halt_values=halt_values,
                         step_active=step_active, states=states, op_values=op_values,
                         weights=weights, combined=combined, p_mode=cfg.p_mode)
    return combined, trace


def penalty_coefficient(cfg: HaltingConfig, mask_size: int) -> float:
    """Loss weight applied to the summed per-node propagation cost."""
    if cfg.penalty_mode == "per_train_node":
        return cfg.alpha / mask_size
    return cfg.alpha


def penalized_loss(combined: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                   trace: HaltingTrace, cfg: HaltingConfig) -> float:
    """Data loss on the mask plus the weighted propagation cost of all nodes."""
    ce, _ = nn.softmax_cross_entropy(combined, labels, mask)
    return ce + penalty_coefficient(cfg, len(mask)) * float(trace.cost.sum())


def adaptive_backward(trace: HaltingTrace, d_combined: np.ndarray,
                      cfg: HaltingConfig, params: ModelParams,
                      op: PropagationOperator, penalty_coef: float = 0.0):
    """Gradients of (data loss + penalty) through the adaptive loop.

    Returns d_z0 and accumulates halting-unit gradients into params.
    The step counts and weight case structure are constants here; the
    penalty reaches the halting values only through the remainder.
    """
    n, _ = d_combined.shape
    max_step = trace.max_step
    steps = trace.steps
    node_idx = np.arange(n)
    inv_steps = 1.0 / steps
    final_row = steps - 1                      # row of each node's last step

    # d(loss)/d(weight_k): pairs each step's state against its predecessor
    d_weights = np.zeros((max_step, n))
    for kk in range(max_step):
        diff = (trace.states[kk + 1] - trace.states[kk]).astype(np.float64)
        d_weights[kk] = np.where(
            trace.step_active[kk],
            inv_steps * (d_combined.astype(np.float64) * diff).sum(axis=1),
            0.0)

    # d(loss)/d(halt_k); the final step's halting value carries no gradient
    k_index = np.arange(1, max_step + 1)[:, None]
    final = k_index == steps[None, :]
    before_final = trace.step_active & ~final
    d_final_w = d_weights[final_row, node_idx]    # gradient w.r.t. the remainder
    d_halt = np.zeros((max_step, n))
    if cfg.p_mode == "act":
        d_halt = np.where(before_final,
                          d_weights - d_final_w[None, :] - penalty_coef, 0.0)
    else:
        # every pre-final weight is the same cumulative sum, whose terms
        # include the final halting value as well
        d_cum = np.where(before_final, d_weights, 0.0).sum(axis=0)
        d_halt = np.where(trace.step_active, d_cum[None, :], 0.0)
        d_halt += np.where(before_final, -d_final_w[None, :] - penalty_coef, 0.0)

    # halting unit: halt = sigmoid(state @ w + b)
    d_pre = d_halt * trace.halt_values * (1.0 - trace.halt_values)
    halt_w = params.halt_w.value.astype(np.float64)

    # walk the propagation chain backwards; halted rows pass gradients through
    d_state = np.zeros(d_combined.shape, dtype=np.float64)
    d_z0 = None
    for kk in range(max_step - 1, -2, -1):
        if kk >= 0:
            in_step = trace.step_active[kk]
            coeff = inv_steps * (trace.weights[kk] * in_step)
            if kk + 1 < max_step:
                nxt = trace.step_active[kk + 1]
                coeff = coeff + inv_steps * ((1.0 - trace.weights[kk + 1]) * nxt)
            d_state += coeff[:, None] * d_combined.astype(np.float64)
            d_state += (d_pre[kk])[:, None] * halt_w[None, :]
            params.halt_w.grad += (trace.states[kk + 1].astype(np.float64).T
                                   @ d_pre[kk]).astype(params.dtype)
            params.halt_b.grad += params.dtype.type(d_pre[kk].sum())
            # through z_k = where(active, P_k @ z_{k-1}, z_{k-1})
            values = trace.op_values[kk] if trace.op_values[kk] is not None else op.values
            masked = np.where(in_step[:, None], d_state, 0.0)
            flowed = _kernels.spmm(op.csr_offsets, op.csr_targets,
                                   values.astype(np.float64, copy=False),
                                   np.ascontiguousarray(masked))
            d_state = flowed + np.where(in_step[:, None], 0.0, d_state)
        else:
            # seed term: coefficient (1 - weight_1) / steps, always present
            coeff = inv_steps * (1.0 - trace.weights[0]) * trace.step_active[0]
            d_state += coeff[:, None] * d_combined.astype(np.float64)
            d_z0 = d_state
    return d_z0.astype(d_combined.dtype)


def propagate_fixed(op: PropagationOperator, z0: np.ndarray, k: int) -> np.ndarray:
    """Plain fixed-depth diffusion of the seeds (k = 0 is the bare MLP)."""
    if k < 0:
        raise ValueError("step count must be >= 0")
    z = z0
    for _ in range(k):
        z = propagate(op, z)
    return z
