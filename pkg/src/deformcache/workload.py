"""Synthetic workloads, top-k query pruning and the gather/scatter index remap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionOutput, FeaturePyramid, PyramidDims, QueryBatch
from .errors import ConfigurationError, DataCorruptionError, RejectedInputError

MODES = ("dense_encoder", "sparse_encoder", "decoder")
DISTRIBUTIONS = ("uniform", "clustered", "grid")
SCORE_MODELS = ("random", "saliency")

# Level shapes whose location count is the 20097 encoder queries of the
# standard Deformable DETR setting (strides 8..64 of a ~800x1200 input).
FULL_SCALE_LEVELS = ((100, 151), (50, 76), (25, 38), (13, 19))
DESK_LEVELS = ((64, 64), (32, 32), (16, 16), (8, 8))


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str = "decoder"
    levels: tuple = DESK_LEVELS
    channels: int = 32
    heads: int = 4
    points: int = 4
    n_queries: int = 300
    rho: float = 1.0
    distribution: str = "clustered"
    clusters: int = 8
    spread: float = 0.03
    offset_envelope_px: float = 2.0
    scores: str = "saliency"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(tuple(int(v) for v in lvl) for lvl in self.levels))
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}", "workload.mode")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigurationError(f"unknown distribution {self.distribution!r}", "workload.distribution")
        if self.scores not in SCORE_MODELS:
            raise ConfigurationError(f"unknown score model {self.scores!r}", "workload.scores")
        if not 0 < self.rho <= 1:
            raise ConfigurationError("keeping ratio must be in (0, 1]", "workload.rho")
        if self.n_queries < 1:
            raise ConfigurationError("need at least one query", "workload.n_queries")
        if self.clusters < 1:
            raise ConfigurationError("need at least one cluster", "workload.clusters")
        if self.channels % self.heads:
            raise ConfigurationError("channels must be divisible by heads", "workload.channels")
        if self.offset_envelope_px < 0 or self.spread < 0:
            raise ConfigurationError("envelope and spread must be non-negative", "workload")

    @property
    def dims(self) -> PyramidDims:
        return PyramidDims(self.levels, self.channels)


@dataclass
class IndexRemap:
    """Gather/scatter bookkeeping between a batch and its pruned, packed form.

    ``kept_ids`` are in packed order; ``inverse[p]`` is the original batch
    position of packed position ``p`` and ``forward`` maps original positions
    back to packed ones.
    """

    kept_ids: np.ndarray
    inverse: np.ndarray
    forward: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kept_ids = np.asarray(self.kept_ids, dtype=np.int64)
        self.inverse = np.asarray(self.inverse, dtype=np.int64)
        if not self.forward:
            self.forward = {int(o): p for p, o in enumerate(self.inverse)}

    def __len__(self):
        return int(self.kept_ids.shape[0])

    @classmethod
    def identity(cls, ids) -> "IndexRemap":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.arange(ids.shape[0]))


def kept_count(n: int, rho: float) -> int:
    """``ceil(n * rho)`` without float noise pushing exact products up by one."""
    return max(1, math.ceil(n * rho - 1e-9))


def _saliency(points: np.ndarray, rng: np.random.Generator, blobs: int) -> np.ndarray:
    centers = rng.uniform(0.1, 0.9, (blobs, 2))
    widths = rng.uniform(0.04, 0.12, blobs)
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
    return np.exp(-d2 / (2 * widths ** 2)).sum(-1) + 0.05 * rng.random(points.shape[0])


def _dense_points(dims: PyramidDims) -> np.ndarray:
    pts = []
    for h, w in dims.shapes:
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        u = xs.ravel() / max(w - 1, 1)
        v = ys.ravel() / max(h - 1, 1)
        pts.append(np.stack([u, v], axis=-1))
    return np.concatenate(pts)


def _reference_points(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    dims = spec.dims
    if spec.mode != "decoder":
        return _dense_points(dims)
    if spec.distribution == "grid":
        return _dense_points(PyramidDims(dims.shapes[:1], dims.channels))
    if spec.distribution == "uniform":
        return rng.uniform(0.0, 1.0, (spec.n_queries, 2))
    centers = rng.uniform(0.0, 1.0, (spec.clusters, 2))
    label = rng.integers(0, spec.clusters, spec.n_queries)
    pts = centers[label] + rng.normal(0.0, spec.spread, (spec.n_queries, 2))
    return np.clip(pts, 0.0, 1.0)


def generate_workload(spec: WorkloadSpec):
    """Seeded pyramid plus query batch.

    Dense and sparse encoder modes place one query per location of every
    level (sparse mode keeps all of them here; prune with :func:`prune_topk`
    or use :func:`build_workload`). Decoder mode draws ``n_queries`` reference
    points from the configured distribution; the grid distribution yields
    one query per level-0 location. Offsets are uniform within
    ``offset_envelope_px`` pixels on every level.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    pyramid = FeaturePyramid([rng.uniform(-1.0, 1.0, (h, w, spec.channels)) for h, w in dims.shapes])
    pts = _reference_points(spec, rng)
    n = pts.shape[0]
    m, n_lvl, k = spec.heads, dims.levels, spec.points
    env = spec.offset_envelope_px
    px = rng.uniform(-env, env, (n, m, n_lvl, k, 2))
    norm = np.array([[max(w - 1, 1), max(h - 1, 1)] for h, w in dims.shapes], dtype=np.float64)
    offsets = px / norm[None, None, :, None, :]
    logits = rng.normal(0.0, 1.0, (n, m, n_lvl, k))
    return pyramid, QueryBatch(np.arange(n), pts, offsets, logits)


def query_scores(queries: QueryBatch, model: str, seed: int) -> np.ndarray:
    """Caller-side pruning scores: i.i.d. random, or a smooth blob field over the image."""
    rng = np.random.default_rng([seed, 7])
    if model == "random":
        return rng.random(len(queries))
    return _saliency(queries.ref_points, rng, blobs=6)


def prune_topk(queries: QueryBatch, scores, keep: int):
    """Keep the ``keep`` best-scoring queries, packed by descending score (ties: lower id).

    Keeping every query is the identity: nothing is gathered and the original
    order survives.
    """
    n = len(queries)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if keep < 1:
        raise RejectedInputError("keep must be at least 1 (empty workload)")
    if keep > n:
        raise RejectedInputError(f"cannot keep {keep} of {n} queries")
    if scores.shape[0] != n or not np.isfinite(scores).all():
        raise RejectedInputError("need one finite score per query")
    if keep == n:
        return queries, IndexRemap.identity(queries.ids)
    packed = np.lexsort((queries.ids, -scores))[:keep]
    return queries.take(packed), IndexRemap(queries.ids[packed], packed)


def build_workload(spec: WorkloadSpec):
    """Generate, then prune to ``ceil(n * rho)`` for the sparse encoder mode.

    Returns ``(pyramid, queries, remap)``.
    """
    pyramid, queries = generate_workload(spec)
    if spec.mode == "sparse_encoder":
        scores = query_scores(queries, spec.scores, spec.seed)
        queries, remap = prune_topk(queries, scores, kept_count(len(queries), spec.rho))
    else:
        remap = IndexRemap.identity(queries.ids)
    return pyramid, queries, remap


def scatter_restore(outputs: AttentionOutput, remap: IndexRemap) -> AttentionOutput:
    """Reorder pruned-batch outputs back into original batch order."""
    position = {int(i): int(p) for i, p in zip(remap.kept_ids, remap.inverse)}
    try:
        keys = np.array([position[int(i)] for i in outputs.ids], dtype=np.int64)
    except KeyError as exc:
        raise DataCorruptionError(f"output id {exc.args[0]} is not part of the remap") from None
    idx = np.argsort(keys, kind="stable")
    return AttentionOutput(outputs.ids[idx], outputs.out[idx])


def burst_length_stats(remap: IndexRemap, footprint_sets) -> dict:
    """Run lengths of consecutive addresses in the packed external access stream.

    ``footprint_sets`` is indexed by original batch position; the stream
    visits them in packed order.
    """
    parts = [np.asarray(footprint_sets[o], dtype=np.int64) for o in remap.inverse]
    stream = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    if stream.size == 0:
        return {"runs": 0, "mean_run": 0.0}
    breaks = np.flatnonzero(np.diff(stream) != 1)
    runs = breaks.size + 1
    return {"runs": int(runs), "mean_run": stream.size / runs}


def planted_clusters(seed: int, n: int = 8, dims: PyramidDims = PyramidDims(DESK_LEVELS, 32),
                     heads: int = 4, points: int = 4, spread: float = 0.01,
                     envelope_px: float = 2.0):
    """Small scheduling instance whose batch order alternates between 2-3 tight clusters.

    Returns ``(ref_points, offsets)``; consecutive queries in batch order come
    from different clusters, so the identity schedule pays a full footprint
    at almost every step.
    """
    rng = np.random.default_rng([seed, 3])
    c = int(rng.integers(2, 4))
    centers = rng.uniform(0.15, 0.85, (c, 2))
    pts = np.clip(centers[np.arange(n) % c] + rng.normal(0.0, spread, (n, 2)), 0.0, 1.0)
    px = rng.uniform(-envelope_px, envelope_px, (n, heads, dims.levels, points, 2))
    norm = np.array([[max(w - 1, 1), max(h - 1, 1)] for h, w in dims.shapes], dtype=np.float64)
    return pts, px / norm[None, None, :, None, :]
