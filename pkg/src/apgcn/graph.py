"""Graph bundles and the symmetric normalized propagation operator.

A :class:`GraphBundle` stores an undirected simple graph in CSR form
together with node features and labels. Operators derived from it are
immutable and safe to share across workers; randomized edge dropout
takes an explicit generator so callers own determinism.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels


class GraphError(ValueError):
    """Malformed graph input or operation precondition failure."""


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True)
class GraphBundle:
    """Immutable graph: symmetric CSR connectivity, features, labels.

    Adjacency stores both arc directions and no self-loops; targets are
    sorted within each row. ``n_edges`` counts undirected pairs, so the
    stored arc count is ``2 * n_edges``.
    """

    n_nodes: int
    n_edges: int
    csr_offsets: np.ndarray   # int64, shape (n_nodes + 1,)
    csr_targets: np.ndarray   # int32, shape (2 * n_edges,)
    features: np.ndarray      # float, shape (n_nodes, d_features)
    labels: np.ndarray        # int32, shape (n_nodes,)
    n_classes: int
    d_features: int
    names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        _freeze(self.csr_offsets, self.csr_targets, self.features, self.labels)

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def arc_sources(self) -> np.ndarray:
        """Row index of every stored arc (same length as csr_targets)."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64),
                         np.diff(self.csr_offsets))

    def check(self) -> None:
        """Validate the structural invariants; raises GraphError on violation."""
        n = self.n_nodes
        if n <= 0:
            raise GraphError("empty graph")
        if self.csr_offsets.shape != (n + 1,) or self.csr_offsets[0] != 0:
            raise GraphError("bad offsets shape")
        if np.any(np.diff(self.csr_offsets) < 0):
            raise GraphError("offsets not non-decreasing")
        if self.csr_offsets[-1] != 2 * self.n_edges:
            raise GraphError("arc count does not match 2 * n_edges")
        if self.csr_targets.shape[0] != self.csr_offsets[-1]:
            raise GraphError("targets length does not match offsets")
        if self.csr_targets.size and (self.csr_targets.min() < 0
                                      or self.csr_targets.max() >= n):
            raise GraphError("target index out of range")
        src = self.arc_sources()
        if np.any(src == self.csr_targets):
            raise GraphError("self-loop stored in adjacency")
        # symmetry: the multiset of (i, j) arcs equals the multiset of (j, i)
        fwd = src * n + self.csr_targets
        bwd = self.csr_targets.astype(np.int64) * n + src
        if not np.array_equal(np.sort(fwd), np.sort(bwd)):
            raise GraphError("adjacency is not symmetric")
        if self.features.shape != (n, self.d_features):
            raise GraphError("features shape mismatch")
        if self.labels.shape != (n,):
            raise GraphError("labels shape mismatch")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise GraphError("label out of range")


@dataclass(frozen=True)
class PropagationOperator:
    """Sparse symmetric operator applied at every diffusion step.

    Same CSR layout as the source bundle plus a value per stored arc;
    diagonal entries are explicit. ``pair_ids`` maps every arc to its
    undirected pair so dropout can drop both directions jointly.
    """

    n_nodes: int
    csr_offsets: np.ndarray    # int64
    csr_targets: np.ndarray    # int32
    values: np.ndarray         # float
    pair_ids: np.ndarray       # int64 per arc, shared by (i,j) and (j,i)
    n_pairs: int
    diag_pairs: np.ndarray     # bool per pair: True for self-loop entries

    def __post_init__(self):
        _freeze(self.csr_offsets, self.csr_targets, self.values,
                self.pair_ids, self.diag_pairs)

    def astype(self, dtype) -> "PropagationOperator":
        if self.values.dtype == np.dtype(dtype):
            return self
        return replace(self, values=self.values.astype(dtype))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_nodes, self.n_nodes), dtype=self.values.dtype)
        src = np.repeat(np.arange(self.n_nodes), np.diff(self.csr_offsets))
        out[src, self.csr_targets] = self.values
        return out


def build_graph(edge_pairs, features, labels, names: Optional[Sequence[str]] = None,
                n_classes: Optional[int] = None) -> GraphBundle:
    """Assemble a bundle from an edge list; symmetrizes, drops duplicates and self-loops."""
    try:
        features = np.asarray(features)
    except ValueError as exc:
        raise GraphError("ragged feature rows") from exc
    if features.dtype == object:
        raise GraphError("ragged feature rows")
    if features.ndim != 2:
        raise GraphError(f"features must be 2-D, got shape {features.shape}")
    if not np.issubdtype(features.dtype, np.floating):
        features = features.astype(np.float64)
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise GraphError("labels must be a 1-D integer vector")
    labels = labels.astype(np.int32)

    n = features.shape[0]
    if n == 0:
        raise GraphError("empty graph")
    if labels.shape[0] != n:
        raise GraphError(f"feature rows ({n}) != label count ({labels.shape[0]})")
    if labels.min(initial=0) < 0:
        raise GraphError("negative label")
    inferred_c = int(labels.max(initial=-1)) + 1 if labels.size else 0
    if n_classes is None:
        n_classes = max(inferred_c, 1)
    elif inferred_c > n_classes:
        raise GraphError("label out of range for given n_classes")

    pairs = np.asarray(list(edge_pairs), dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise GraphError("edge index out of range")
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]           # no self-loops
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    if lo.size:
        uniq = np.unique(lo * n + hi)                   # dedup either direction
        lo, hi = uniq // n, uniq % n
    n_edges = lo.shape[0]

    src = np.concatenate([lo, hi])
    dst = np.concatenate([hi, lo])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])

    bundle = GraphBundle(
        n_nodes=n, n_edges=int(n_edges),
        csr_offsets=offsets, csr_targets=dst.astype(np.int32),
        features=features, labels=labels,
        n_classes=int(n_classes), d_features=int(features.shape[1]),
        names=tuple(names) if names is not None else None,
    )
    bundle.check()
    return bundle


def connected_components(g: GraphBundle) -> np.ndarray:
    """Component id per node; ids are assigned in ascending order of each
    component's smallest node index."""
    comp = np.full(g.n_nodes, -1, dtype=np.int64)
    offsets, targets = g.csr_offsets, g.csr_targets
    next_id = 0
    for start in range(g.n_nodes):
        if comp[start] >= 0:
            continue
        comp[start] = next_id
        queue = collections.deque([start])
        while queue:
            u = queue.popleft()
            for v in targets[offsets[u]:offsets[u + 1]]:
                if comp[v] < 0:
                    comp[v] = next_id
                    queue.append(v)
        next_id += 1
    return comp


def largest_connected_component(g: GraphBundle) -> GraphBundle:
    """Induced subgraph on the largest component, nodes re-indexed in
    ascending original order. Ties keep the component of the smallest
    original node index."""
    comp = connected_components(g)
    sizes = np.bincount(comp)
    best = int(np.argmax(sizes))        # first max = smallest-index component
    keep = np.flatnonzero(comp == best)
    if keep.shape[0] == g.n_nodes:
        return g

    new_id = np.full(g.n_nodes, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.shape[0])
    src = g.arc_sources()
    arc_keep = comp[src] == best
    new_src = new_id[src[arc_keep]]
    new_dst = new_id[g.csr_targets[arc_keep]]
    offsets = np.zeros(keep.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(new_src, minlength=keep.shape[0]), out=offsets[1:])

    return GraphBundle(
        n_nodes=int(keep.shape[0]), n_edges=int(new_dst.shape[0] // 2),
        csr_offsets=offsets, csr_targets=new_dst.astype(np.int32),
        features=g.features[keep], labels=g.labels[keep],
        n_classes=g.n_classes, d_features=g.d_features,
        names=tuple(g.names[i] for i in keep) if g.names is not None else None,
    )


def l1_normalize_features(g: GraphBundle) -> GraphBundle:
    """Scale every feature row to sum 1; all-zero rows stay zero."""
    if g.features.size and g.features.min() < 0:
        raise GraphError("negative feature value")
    sums = g.features.sum(axis=1, keepdims=True)
    scale = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return replace(g, features=(g.features * scale).astype(g.features.dtype))


def _pair_structure(src, dst, n):
    key = np.minimum(src, dst).astype(np.int64) * n + np.maximum(src, dst)
    uniq, pair_ids = np.unique(key, return_inverse=True)
    diag_pairs = np.zeros(uniq.shape[0], dtype=bool)
    diag_pairs[pair_ids[src == dst]] = True
    return pair_ids.astype(np.int64), int(uniq.shape[0]), diag_pairs


def build_operator(g: GraphBundle, kind: str = "renorm_adjacency") -> PropagationOperator:
    """Symmetric normalized diffusion operator in CSR with explicit diagonal.

    ``renorm_adjacency`` (default): adjacency plus self-loops, degree
    normalized on both sides. ``sym_laplacian``: the symmetric normalized
    Laplacian of the raw adjacency (no added self-loops); kept as an
    alternative reading of the propagation step.
    """
    n = g.n_nodes
    src = g.arc_sources()
    dst = g.csr_targets.astype(np.int64)

    if kind == "renorm_adjacency":
        deg = (g.degrees() + 1).astype(np.float64)      # degrees of A + I
        all_src = np.concatenate([src, np.arange(n, dtype=np.int64)])
        all_dst = np.concatenate([dst, np.arange(n, dtype=np.int64)])
        all_val = 1.0 / np.sqrt(deg[all_src] * deg[all_dst])
    elif kind == "sym_laplacian":
        deg = g.degrees().astype(np.float64)
        inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
        all_src = np.concatenate([src, np.arange(n, dtype=np.int64)])
        all_dst = np.concatenate([dst, np.arange(n, dtype=np.int64)])
        off_val = -inv_sqrt[src] * inv_sqrt[dst]
        diag_val = np.where(deg > 0, 1.0, 0.0)
        all_val = np.concatenate([off_val, diag_val])
    else:
        raise GraphError(f"unknown operator kind: {kind!r}")

    order = np.lexsort((all_dst, all_src))
    all_src, all_dst, all_val = all_src[order], all_dst[order], all_val[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(all_src, minlength=n), out=offsets[1:])
    pair_ids, n_pairs, diag_pairs = _pair_structure(all_src, all_dst, n)

    return PropagationOperator(
        n_nodes=n, csr_offsets=offsets, csr_targets=all_dst.astype(np.int32),
        values=all_val, pair_ids=pair_ids, n_pairs=n_pairs, diag_pairs=diag_pairs,
    )


def sample_edge_dropout(op: PropagationOperator, rate: float,
                        rng: np.random.Generator) -> PropagationOperator:
    """Drop each off-diagonal symmetric pair with probability ``rate``.

    Surviving entries are scaled by 1/(1-rate) so the operator stays
    unbiased in expectation; diagonal entries are always kept and get
    the same scaling. Symmetry is preserved because both directions of
    a pair share one draw.
    """
    if not 0.0 <= rate < 1.0:
        raise GraphError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return op
    keep = rng.random(op.n_pairs) >= rate
    keep |= op.diag_pairs
    factor = keep.astype(op.values.dtype) / op.values.dtype.type(1.0 - rate)
    return replace(op, values=op.values * factor[op.pair_ids])


def propagate(op: PropagationOperator, z: np.ndarray) -> np.ndarray:
    """One diffusion step: the sparse operator applied to per-node rows."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] != op.n_nodes:
        raise GraphError(
            f"dimension mismatch: operator has {op.n_nodes} nodes, state is {z.shape}")
    dtype = np.result_type(op.values, z)
    return _kernels.spmm(op.csr_offsets, op.csr_targets,
                         op.values.astype(dtype, copy=False),
                         z.astype(dtype, copy=False))
