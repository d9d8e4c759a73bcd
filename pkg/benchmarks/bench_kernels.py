"""Compare the compiled CSR kernel against the numpy fallback.

Times the raw sparse product on operator- and feature-shaped workloads,
then a full training epoch with each backend. Run after building the
extension:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from apgcn import _kernels
from apgcn._kernels import _pyref
from apgcn.dataio import SbmSpec, generate_sbm
from apgcn.graph import build_operator, l1_normalize_features, \
    largest_connected_component
from apgcn.model import SeedFeatures
from apgcn.protocol import make_splits
from apgcn.training import GraphRuntime, TrainConfig


def timeit(fn, repeats=50):
    fn()                                   # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1000.0


def bench_spmm(label, indptr, indices, values, dense):
    compiled = None
    if _kernels.BACKEND == "compiled":
        compiled = timeit(lambda: _kernels._impl.spmm(indptr, indices,
                                                      values, dense))
    fallback = timeit(lambda: _pyref.spmm(indptr, indices, values, dense))
    speedup = f"{fallback / compiled:5.1f}x" if compiled else "    -"
    compiled_txt = f"{compiled:8.3f}" if compiled else "       -"
    print(f"{label:<38} {compiled_txt} {fallback:8.3f} {speedup}")


def epoch_time(graph, backend_label):
    cfg = TrainConfig(alpha=0.005, max_epochs=10, patience=5, hidden=64)
    rt = GraphRuntime(graph, cfg)
    splits = make_splits(graph, seed=1, n_per_class=5, visible_size=600,
                         stopping_size=200)
    params = rt.init_params(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    rt.loss_and_grads(params, splits.train, rng)        # warm up
    t0 = time.perf_counter()
    for _ in range(20):
        rt.loss_and_grads(params, splits.train, rng)
    ms = (time.perf_counter() - t0) / 20 * 1000.0
    print(f"full train epoch [{backend_label}]          {ms:8.3f} ms")


def main():
    print(f"active backend: {_kernels.BACKEND}")
    print(f"{'workload':<38} {'compiled':>8} {'fallback':>8} speedup")

    g = generate_sbm(SbmSpec(blocks=8, nodes_per_block=300, p_in=0.03,
                             p_out=0.003, feature_noise=3.0, seed=1))
    g = l1_normalize_features(largest_connected_component(g))
    op = build_operator(g).astype(np.float32)
    rng = np.random.default_rng(0)

    state = rng.normal(size=(g.n_nodes, 8)).astype(np.float32)
    bench_spmm(f"operator ({g.n_nodes} nodes x 8 classes)",
               op.csr_offsets, op.csr_targets, op.values, state)

    feats = SeedFeatures(g.features, dtype=np.float32)
    w1 = rng.normal(size=(g.d_features, 64)).astype(np.float32)
    bench_spmm(f"features ({feats.values.size} nnz x 64 hidden)",
               feats.indptr, feats.indices, feats.values, w1)

    wide = rng.normal(size=(g.n_nodes, 64)).astype(np.float32)
    bench_spmm(f"operator ({g.n_nodes} nodes x 64 wide)",
               op.csr_offsets, op.csr_targets, op.values, wide)

    epoch_time(g, _kernels.BACKEND)
    print("\nrun with APGCN_PURE_PYTHON=1 to measure the epoch on the "
          "fallback backend")


if __name__ == "__main__":
    main()
