"""Bundle serialization, plain-text ingestion, synthetic graph generation.

The on-disk format ("APGB1") is a little-endian header plus raw array
sections and a trailing CRC-32 over everything before it:

    magic  b"APGB1"
    header u64 x5: n_nodes, n_arcs, d_features, n_classes, flags
    csr_offsets  u64 x (n_nodes + 1)
    csr_targets  u32 x n_arcs
    features     dense: f32 row-major n_nodes x d
                 sparse (flags bit 0): u64 nnz, then nnz triplets
                 (u32 row, u32 col, f32 value) in row-major order
    labels       i32 x n_nodes
    crc32        u32

The sparse feature section is chosen automatically below 5% density.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .graph import GraphBundle, GraphError, build_graph, l1_normalize_features, \
    largest_connected_component

MAGIC = b"APGB1"
FLAG_SPARSE_FEATURES = 1
_SPARSE_DENSITY_CUTOFF = 0.05


class BundleFormatError(ValueError):
    """Serialization failure; ``code`` distinguishes the cause."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class IngestError(ValueError):
    """Text ingestion failure, annotated with file and line."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}" if line_no
                         else f"{path}: {message}")
        self.path = str(path)
        self.line_no = line_no


def write_bundle(g: GraphBundle) -> bytes:
    """Serialize a bundle; features are stored at 32-bit precision."""
    if g.d_features < 1:
        raise BundleFormatError("bad-dimensions", "d must be >= 1")
    feats = np.ascontiguousarray(g.features, dtype=np.float32)
    nnz = int(np.count_nonzero(feats))
    density = nnz / feats.size
    flags = FLAG_SPARSE_FEATURES if density < _SPARSE_DENSITY_CUTOFF else 0

    n_arcs = int(g.csr_offsets[-1])
    parts = [MAGIC,
             struct.pack("<5Q", g.n_nodes, n_arcs, g.d_features, g.n_classes, flags),
             g.csr_offsets.astype("<u8").tobytes(),
             g.csr_targets.astype("<u4").tobytes()]
    if flags & FLAG_SPARSE_FEATURES:
        rows, cols = np.nonzero(feats)
        parts.append(struct.pack("<Q", nnz))
        triplets = np.empty(nnz, dtype=[("r", "<u4"), ("c", "<u4"), ("v", "<f4")])
        triplets["r"], triplets["c"] = rows, cols
        triplets["v"] = feats[rows, cols]
        parts.append(triplets.tobytes())
    else:
        parts.append(feats.astype("<f4").tobytes())
    parts.append(g.labels.astype("<i4").tobytes())

    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.buf):
            raise BundleFormatError("truncated", f"truncated {what} section")
        out = self.buf[self.pos:self.pos + count]
        self.pos += count
        return out

    def array(self, dtype, count, what) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt)


def read_bundle(buf: bytes) -> GraphBundle:
    """Parse APGB1 bytes back into a validated bundle."""
    if len(buf) < len(MAGIC) + 40 + 4:
        raise BundleFormatError("truncated", "file shorter than header")
    if buf[:len(MAGIC)] != MAGIC:
        raise BundleFormatError("bad-magic", "not an APGB1 file")
    stored_crc, = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise BundleFormatError("crc-mismatch", "checksum does not match")

    r = _Reader(buf[:-4])
    r.take(len(MAGIC), "magic")
    n, n_arcs, d, c, flags = struct.unpack("<5Q", r.take(40, "header"))
    if n == 0 or d == 0 or c == 0:
        raise BundleFormatError("count-mismatch", "zero node/feature/class count")
    if n_arcs % 2 != 0:
        raise BundleFormatError("count-mismatch", "odd arc count")
    if flags & ~FLAG_SPARSE_FEATURES:
        raise BundleFormatError("unsupported-flags", f"unknown flags {flags:#x}")

    offsets = r.array("<u8", n + 1, "offsets").astype(np.int64)
    targets = r.array("<u4", n_arcs, "targets").astype(np.int32)
    if offsets[0] != 0 or offsets[-1] != n_arcs or np.any(np.diff(offsets) < 0):
        raise BundleFormatError("count-mismatch", "inconsistent offsets")
    if targets.size and targets.max() >= n:
        raise BundleFormatError("count-mismatch", "target index out of range")

    if flags & FLAG_SPARSE_FEATURES:
        nnz, = struct.unpack("<Q", r.take(8, "feature count"))
        trip = r.array([("r", "<u4"), ("c", "<u4"), ("v", "<f4")], nnz, "features")
        if nnz and (trip["r"].max() >= n or trip["c"].max() >= d):
            raise BundleFormatError("count-mismatch", "feature index out of range")
        feats = np.zeros((n, d), dtype=np.float32)
        feats[trip["r"], trip["c"]] = trip["v"]
    else:
        feats = r.array("<f4", n * d, "features").reshape(n, d).copy()

    labels = r.array("<i4", n, "labels").copy()
    if r.pos != len(r.buf):
        raise BundleFormatError("count-mismatch", "trailing bytes after sections")
    if labels.min() < 0 or labels.max() >= c:
        raise BundleFormatError("count-mismatch", "label out of declared range")

    bundle = GraphBundle(n_nodes=int(n), n_edges=int(n_arcs // 2),
                         csr_offsets=offsets, csr_targets=targets,
                         features=feats, labels=labels,
                         n_classes=int(c), d_features=int(d))
    try:
        bundle.check()
    except GraphError as exc:
        raise BundleFormatError("count-mismatch", str(exc)) from exc
    return bundle


def save_bundle(g: GraphBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_bundle(g))


def load_bundle(path) -> GraphBundle:
    with open(path, "rb") as fh:
        return read_bundle(fh.read())


def _parse_lines(path, parse, what):
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(parse(line))
            except ValueError as exc:
                raise IngestError(path, line_no, f"bad {what}: {exc}") from exc
    return out


def ingest_text(edges_path, features_path, labels_path) -> GraphBundle:
    """Build a bundle from whitespace edge pairs, CSV feature rows and one
    label per line, then apply the standard preprocessing (largest
    component, row-normalized features)."""
    def parse_edge(line):
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"expected 2 indices, got {len(parts)}")
        return int(parts[0]), int(parts[1])

    edges = _parse_lines(edges_path, parse_edge, "edge")
    features = _parse_lines(features_path,
                            lambda s: [float(x) for x in s.split(",")], "feature row")
    labels = _parse_lines(labels_path, int, "label")

    widths = {len(row) for row in features}
    if len(widths) > 1:
        raise IngestError(features_path, 0,
                          f"ragged feature rows (widths {sorted(widths)})")
    if len(features) != len(labels):
        raise IngestError(labels_path, 0,
                          f"label count {len(labels)} != feature rows {len(features)}")

    g = build_graph(edges, np.asarray(features, dtype=np.float32),
                    np.asarray(labels, dtype=np.int64))
    g = largest_connected_component(g)
    return l1_normalize_features(g)


@dataclass
class SbmSpec:
    """Stochastic block model with noisy one-hot block features."""
    blocks: int
    nodes_per_block: int
    p_in: float
    p_out: float
    feature_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1 or self.nodes_per_block < 1:
            raise ValueError("blocks and nodes_per_block must be >= 1")
        for p in (self.p_in, self.p_out):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        if not self.p_in > self.p_out:
            raise ValueError("p_in must exceed p_out")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")


def generate_sbm(spec: SbmSpec) -> GraphBundle:
    """Sample a block-model graph; deterministic given the seed.

    Draw protocol (mirrored by the test-suite reference sampler): one
    uniform matrix of shape (n, n), an edge {i, j} with i < j exists
    when u[i, j] < p(block_i, block_j); afterwards one uniform (n,
    blocks) matrix for the feature noise.
    """
    n = spec.blocks * spec.nodes_per_block
    labels = np.repeat(np.arange(spec.blocks), spec.nodes_per_block)
    rng = np.random.default_rng(spec.seed)

    u = rng.random((n, n))
    prob = np.where(labels[:, None] == labels[None, :], spec.p_in, spec.p_out)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    src, dst = np.nonzero(upper & (u < prob))

    feats = np.eye(spec.blocks, dtype=np.float64)[labels]
    if spec.feature_noise > 0:
        feats = feats + spec.feature_noise * rng.random((n, spec.blocks))
    feats /= feats.sum(axis=1, keepdims=True)

    return build_graph(list(zip(src.tolist(), dst.tolist())),
                       feats.astype(np.float32), labels,
                       n_classes=spec.blocks)
