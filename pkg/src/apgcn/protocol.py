"""Seeded evaluation protocol: splits, run grids, bootstrap intervals, sweeps.

A plan is split seeds crossed with weight-init seeds (20 x 5 in the
full protocol); reduced desk-scale grids are first-class. Nodes are
partitioned into a visible pool (train / early-stop / validation) and
an invisible test set that is used exactly once per run.
"""

from __future__ import annotations

import concurrent.futures
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .graph import GraphBundle
from .training import GraphRuntime, TrainConfig, train


class SplitError(ValueError):
    """Split sizes infeasible for the dataset."""


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    stop: np.ndarray
    valid: np.ndarray
    test: np.ndarray


@dataclass
class ExperimentPlan:
    split_seeds: tuple = tuple(range(1, 21))
    init_seeds: tuple = tuple(range(1, 6))
    n_per_class: int = 20
    visible_size: int = 1500
    stopping_size: int = 500
    config: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "unnamed"

    @property
    def n_runs(self) -> int:
        return len(self.split_seeds) * len(self.init_seeds)


@dataclass
class RunResult:
    split_seed: int
    init_seed: int
    test_accuracy: float
    mean_steps: float
    step_histogram: np.ndarray
    epochs_run: int
    wall_time_ms_per_epoch: float


def make_splits(g: GraphBundle, seed: int, n_per_class: int = 20,
                visible_size: int = 1500, stopping_size: int = 500) -> Splits:
    """Deterministic visible/invisible split; inside the visible pool,
    n_per_class training nodes per class, then the stopping set, then
    validation; everything invisible is test."""
    n = g.n_nodes
    if n_per_class < 1:
        raise SplitError("n_per_class must be >= 1")
    if visible_size > n:
        raise SplitError(f"visible_size {visible_size} exceeds {n} nodes")
    if n_per_class * g.n_classes + stopping_size > visible_size:
        raise SplitError("visible pool too small for train + stopping sets")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    visible = perm[:visible_size]
    test = np.sort(perm[visible_size:])

    train_idx = []
    taken = np.zeros(n, dtype=bool)
    for c in range(g.n_classes):
        pool = visible[g.labels[visible] == c]
        if pool.shape[0] < n_per_class:
            raise SplitError(
                f"class {c} has {pool.shape[0]} visible nodes, need {n_per_class}")
        chosen = pool[:n_per_class]          # visible order is already random
        train_idx.append(chosen)
        taken[chosen] = True
    train_arr = np.sort(np.concatenate(train_idx))

    rest = visible[~taken[visible]]
    stop = np.sort(rest[:stopping_size])
    valid = np.sort(rest[stopping_size:])
    return Splits(train=train_arr, stop=stop, valid=valid, test=test)


def _run_seed(split_seed: int, init_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([split_seed, init_seed, 7]))


def run_single(rt: GraphRuntime, plan: ExperimentPlan, split_seed: int,
               init_seed: int) -> RunResult:
    splits = make_splits(rt.bundle, split_seed, plan.n_per_class,
                         plan.visible_size, plan.stopping_size)
    params = rt.init_params(np.random.default_rng(init_seed))
    t0 = time.perf_counter()
    params, history = train(rt, splits, params, plan.config,
                            _run_seed(split_seed, init_seed))
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    acc, _, mean_steps, hist = rt.eval_stats(params, splits.test)
    return RunResult(split_seed=split_seed, init_seed=init_seed,
                     test_accuracy=acc, mean_steps=mean_steps,
                     step_histogram=hist, epochs_run=len(history),
                     wall_time_ms_per_epoch=elapsed_ms / max(len(history), 1))


def _run_task(args):
    bundle, plan, split_seed, init_seed = args
    rt = GraphRuntime(bundle, plan.config)
    return run_single(rt, plan, split_seed, init_seed)


def run_grid(plan: ExperimentPlan, g: GraphBundle, jobs: int = 1,
             continue_on_error: bool = False):
    """Trains and evaluates every (split_seed, init_seed) pair.

    Returns (results, failures); failures is a list of
    (split_seed, init_seed, message) and stays empty unless
    ``continue_on_error`` is set (otherwise the first error propagates,
    annotated with the run identity).
    """
    pairs = [(s, i) for s in plan.split_seeds for i in plan.init_seeds]
    results: list[RunResult] = []
    failures: list[tuple[int, int, str]] = []

    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_run_task, (g, plan, s, i)): (s, i)
                       for s, i in pairs}
            for fut in concurrent.futures.as_completed(futures):
                s, i = futures[fut]
                try:
                    results.append(fut.result())
                except Exception as exc:
                    if not continue_on_error:
                        raise RuntimeError(
                            f"run split_seed={s} init_seed={i} failed: {exc}") from exc
                    failures.append((s, i, str(exc)))
        results.sort(key=lambda r: (plan.split_seeds.index(r.split_seed),
                                    plan.init_seeds.index(r.init_seed)))
    else:
        rt = GraphRuntime(g, plan.config)
        for s, i in pairs:
            try:
                results.append(run_single(rt, plan, s, i))
            except Exception as exc:
                if not continue_on_error:
                    raise RuntimeError(
                        f"run split_seed={s} init_seed={i} failed: {exc}") from exc
                failures.append((s, i, str(exc)))
    return results, failures


def bootstrap_ci(values: Sequence[float], level: float = 0.95,
                 n_resamples: int = 1000, seed: int = 0):
    """Percentile bootstrap of the mean; returns (mean, lo, hi)."""
    values = np.sort(np.asarray(values, dtype=np.float64))  # order-invariant
    if values.size == 0:
        raise ValueError("empty input")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return float(values.mean()), float(lo), float(hi)


@dataclass
class SweepPoint:
    """Aggregate over one grid: accuracy interval plus step-density row."""
    value: float                 # the swept setting (penalty or train size)
    accuracy_mean: float
    accuracy_lo: float
    accuracy_hi: float
    mean_steps: float
    step_density: np.ndarray     # length max_steps, averaged over runs
    n_runs: int
    failures: list


def _aggregate(value, plan, results, failures, seed) -> SweepPoint:
    accs = [r.test_accuracy for r in results]
    mean, lo, hi = bootstrap_ci(accs, seed=seed)
    density = np.mean([r.step_histogram / r.step_histogram.sum()
                       for r in results], axis=0)
    return SweepPoint(value=value, accuracy_mean=mean, accuracy_lo=lo,
                      accuracy_hi=hi,
                      mean_steps=float(np.mean([r.mean_steps for r in results])),
                      step_density=density, n_runs=len(results),
                      failures=failures)


def sweep_alpha(plan: ExperimentPlan, g: GraphBundle, alphas: Sequence[float],
                jobs: int = 1, seed: int = 0) -> list[SweepPoint]:
    """One grid per propagation-penalty setting."""
    if len(alphas) == 0:
        raise ValueError("alphas must be non-empty")
    points = []
    for a in alphas:
        sub = replace(plan, config=replace(plan.config, alpha=float(a)))
        results, failures = run_grid(sub, g, jobs=jobs, continue_on_error=True)
        points.append(_aggregate(float(a), sub, results, failures, seed))
    return points


def sweep_train_size(plan: ExperimentPlan, g: GraphBundle, sizes: Sequence[int],
                     jobs: int = 1, seed: int = 0) -> list[SweepPoint]:
    """One grid per training-set size (labeled nodes per class)."""
    if len(sizes) == 0:
        raise ValueError("sizes must be non-empty")
    points = []
    for s in sizes:
        if s < 1:
            raise SplitError("n_per_class must be >= 1")
        sub = replace(plan, n_per_class=int(s))
        results, failures = run_grid(sub, g, jobs=jobs, continue_on_error=True)
        points.append(_aggregate(int(s), sub, results, failures, seed))
    return points
