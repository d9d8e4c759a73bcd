"""Full-graph training loop with alternating halting-unit updates.

Every epoch takes one Adam step on the layer weights against the
penalized loss; every ``halt_update_every``-th epoch the halting unit
gets its own step from a fresh forward/backward with the layer weights
frozen. Early stopping tracks the data loss on the stopping split and
restores the best parameters seen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .graph import GraphBundle, build_operator, propagate, sample_edge_dropout
from .model import (HaltingConfig, HaltingTrace, ModelParams, SeedFeatures,
                    adaptive_backward, adaptive_forward, penalty_coefficient,
                    seed_backward, seed_forward)


@dataclass
class TrainConfig:
    lr: float = 0.01
    dropout: float = 0.5
    l2_first_layer: float = 0.008
    max_steps: int = 10
    epsilon: float = 0.01
    alpha: float = 0.0
    halt_update_every: int = 5
    max_epochs: int = 1000
    patience: int = 100
    hidden: int = 64
    p_mode: str = "act"
    penalty_mode: str = "per_train_node"
    operator: str = "renorm_adjacency"
    l2_include_bias: bool = False
    fixed_steps: Optional[int] = None   # bypass halting: plain depth-k baseline
    dtype: str = "float32"

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.max_epochs < 1 or self.halt_update_every < 1:
            raise ValueError("epoch counts must be positive")

    def halting(self) -> HaltingConfig:
        return HaltingConfig(max_steps=self.max_steps, epsilon=self.epsilon,
                             alpha=self.alpha, p_mode=self.p_mode,
                             penalty_mode=self.penalty_mode)

    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    stop_loss: float
    stop_accuracy: float
    mean_steps: float


class GraphRuntime:
    """Operator and feature views precomputed once per (graph, config)."""

    def __init__(self, bundle: GraphBundle, cfg: TrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        self.op = build_operator(bundle, cfg.operator).astype(cfg.np_dtype())
        self.feats = SeedFeatures(bundle.features, dtype=cfg.np_dtype())
        self.labels = bundle.labels

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        return ModelParams.init(rng, self.bundle.d_features, self.bundle.n_classes,
                                hidden=self.cfg.hidden,
                                l2_first_layer=self.cfg.l2_first_layer,
                                l2_include_bias=self.cfg.l2_include_bias,
                                dtype=self.cfg.np_dtype())

    def forward(self, params: ModelParams, train: bool,
                rng: Optional[np.random.Generator] = None):
        """Returns (logits, trace, seed_cache); trace is None in fixed mode."""
        cfg = self.cfg
        z0, cache = seed_forward(self.feats, params, train, cfg.dropout, rng)
        if cfg.fixed_steps is not None:
            ops = []
            z = z0
            for _ in range(cfg.fixed_steps):
                op_k = sample_edge_dropout(self.op, cfg.dropout, rng) \
                    if train and cfg.dropout > 0 else self.op
                ops.append(op_k)
                z = propagate(op_k, z)
            return z, ops, cache
        combined, trace = adaptive_forward(self.op, z0, params, cfg.halting(),
                                           train=train, rng=rng,
                                           edge_dropout=cfg.dropout if train else 0.0)
        return combined, trace, cache

    def loss_and_grads(self, params: ModelParams, mask: np.ndarray,
                       rng: np.random.Generator):
        """One train-mode forward/backward; fills every .grad, returns the loss."""
        cfg = self.cfg
        params.zero_grad()
        logits, trace_or_ops, cache = self.forward(params, train=True, rng=rng)
        if not np.all(np.isfinite(logits)):
            raise nn.DivergenceError("non-finite logits")
        ce, d_logits = nn.softmax_cross_entropy(logits, self.labels, mask)
        if cfg.fixed_steps is not None:
            d = d_logits
            for op_k in reversed(trace_or_ops):
                d = propagate(op_k, d)        # operator is symmetric
            seed_backward(d, cache, self.feats, params)
            return ce
        coef = penalty_coefficient(cfg.halting(), len(mask))
        loss = ce + coef * float(trace_or_ops.cost.sum())
        d_z0 = adaptive_backward(trace_or_ops, d_logits, cfg.halting(), params,
                                 self.op, penalty_coef=coef)
        seed_backward(d_z0, cache, self.feats, params)
        return loss

    def eval_stats(self, params: ModelParams, mask: np.ndarray):
        """Eval-mode (accuracy, data loss, mean steps, step histogram)."""
        logits, trace, _ = self.forward(params, train=False)
        loss, _ = nn.softmax_cross_entropy(logits, self.labels, mask)
        pred = logits[mask].argmax(axis=1)
        acc = float((pred == self.labels[mask]).mean())
        if isinstance(trace, HaltingTrace):
            steps = trace.steps
        else:
            steps = np.full(self.bundle.n_nodes, self.cfg.fixed_steps or 0)
        hist = np.bincount(steps, minlength=self.cfg.max_steps + 1)[1:]
        return acc, loss, float(steps.mean()), hist


def train(bundle_or_runtime, splits, params: ModelParams, cfg: TrainConfig,
          rng: np.random.Generator):
    """Returns (params, history); params end at the best stopping-loss epoch."""
    rt = bundle_or_runtime if isinstance(bundle_or_runtime, GraphRuntime) \
        else GraphRuntime(bundle_or_runtime, cfg)
    train_mask, stop_mask = splits.train, splits.stop

    history: list[EpochRecord] = []
    best_loss = np.inf
    best_snap = params.snapshot()
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        loss = rt.loss_and_grads(params, train_mask, rng)
        if not np.isfinite(loss):
            raise nn.DivergenceError(f"training diverged at epoch {epoch}")
        for p in params.main_group():
            nn.adam_step(p, cfg.lr)
        if cfg.fixed_steps is None and epoch % cfg.halt_update_every == 0:
            rt.loss_and_grads(params, train_mask, rng)
            for p in params.halting_group():
                nn.adam_step(p, cfg.lr)

        stop_acc, stop_loss, mean_steps, _ = rt.eval_stats(params, stop_mask)
        history.append(EpochRecord(epoch, float(loss), float(stop_loss),
                                   stop_acc, mean_steps))

        if stop_loss < best_loss:
            best_loss = stop_loss
            best_snap = params.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    params.restore(best_snap)
    return params, history


def evaluate(bundle_or_runtime, params: ModelParams, cfg: TrainConfig,
             mask: np.ndarray):
    """Eval-mode accuracy on the mask plus the step statistics over all nodes."""
    if np.asarray(mask).size == 0:
        raise ValueError("empty mask")
    rt = bundle_or_runtime if isinstance(bundle_or_runtime, GraphRuntime) \
        else GraphRuntime(bundle_or_runtime, cfg)
    acc, _, mean_steps, hist = rt.eval_stats(params, mask)
    return acc, mean_steps, hist
