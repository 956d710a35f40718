"""Multi-scale deformable attention: reference (two-stage) and fused paths.

Layout conventions used throughout the package:

* a feature level is a ``(H, W, D)`` array, row-major over ``(y, x)``;
* reference points are normalized ``(u, v)`` in ``[0, 1]^2``, mapped to pixel
  coordinates ``(u * (W - 1), v * (H - 1))`` per level;
* offsets are ``(n, M, L, K, 2)`` in the same normalized units as the
  reference points and scaled per level identically;
* logits are ``(n, M, L, K)`` and are normalized with a softmax over the
  ``L * K`` entries of each head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, RejectedInputError


@dataclass(frozen=True)
class PyramidDims:
    """Spatial shapes ``[(H_l, W_l), ...]`` plus the channel count ``D``.

    Also defines the flat line address space used by the cache model: line
    ``(l, y, x)`` lives at ``base[l] + y * W_l + x``.
    """

    shapes: tuple
    channels: int

    def __post_init__(self):
        shapes = tuple((int(h), int(w)) for h, w in self.shapes)
        if not shapes:
            raise ConfigurationError("pyramid needs at least one level")
        if any(h < 1 or w < 1 for h, w in shapes):
            raise ConfigurationError(f"level sizes must be positive, got {shapes}")
        if self.channels < 1:
            raise ConfigurationError("channel count must be positive")
        object.__setattr__(self, "shapes", shapes)

    @property
    def levels(self) -> int:
        return len(self.shapes)

    @property
    def bases(self) -> np.ndarray:
        sizes = [h * w for h, w in self.shapes]
        return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    @property
    def total_locations(self) -> int:
        return sum(h * w for h, w in self.shapes)

    def line_id(self, level, y, x):
        return self.bases[level] + np.asarray(y) * self.shapes[level][1] + np.asarray(x)

    def line_coords(self, line):
        """Inverse of :meth:`line_id` for a single flat address."""
        line = int(line)
        level = int(np.searchsorted(self.bases, line, side="right")) - 1
        rem = line - int(self.bases[level])
        w = self.shapes[level][1]
        return level, rem // w, rem % w


@dataclass
class FeaturePyramid:
    levels: list

    def __post_init__(self):
        self.levels = [np.asarray(a) for a in self.levels]
        if not self.levels:
            raise ConfigurationError("pyramid needs at least one level")
        for lvl in self.levels:
            if lvl.ndim != 3 or min(lvl.shape) < 1:
                raise ConfigurationError(f"feature level must be a non-empty (H, W, D) array, got {lvl.shape}")
        if len({lvl.shape[2] for lvl in self.levels}) != 1:
            raise ConfigurationError("all pyramid levels must share the same channel count")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    @property
    def dims(self) -> PyramidDims:
        return PyramidDims(tuple(lvl.shape[:2] for lvl in self.levels), self.channels)


@dataclass
class QueryBatch:
    ids: np.ndarray
    ref_points: np.ndarray
    offsets: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.ref_points = np.asarray(self.ref_points, dtype=np.float64).reshape(-1, 2)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        n = self.ids.shape[0]
        if self.offsets.ndim != 5 or self.offsets.shape[-1] != 2:
            raise ConfigurationError(f"offsets must be (n, M, L, K, 2), got {self.offsets.shape}")
        if self.ref_points.shape[0] != n or self.offsets.shape[0] != n:
            raise ConfigurationError("ids, ref_points and offsets disagree on the query count")
        if self.logits.shape != self.offsets.shape[:-1]:
            raise ConfigurationError(
                f"logits shape {self.logits.shape} does not match offsets {self.offsets.shape[:-1]}")
        if len(np.unique(self.ids)) != n:
            raise ConfigurationError("query ids must be unique")
        if n and ((self.ref_points < 0).any() or (self.ref_points > 1).any()):
            raise RejectedInputError("reference points must lie in [0, 1]^2")

    def __len__(self):
        return int(self.ids.shape[0])

    @property
    def heads(self) -> int:
        return self.offsets.shape[1]

    @property
    def levels(self) -> int:
        return self.offsets.shape[2]

    @property
    def points(self) -> int:
        return self.offsets.shape[3]

    def take(self, index) -> "QueryBatch":
        index = np.asarray(index, dtype=np.int64)
        return QueryBatch(self.ids[index], self.ref_points[index], self.offsets[index], self.logits[index])


@dataclass
class ProjectionWeights:
    """Per-head projections.

    ``value_proj[m]`` is ``(D/M, D)``, ``output_proj[m]`` is ``(D, D/M)`` and
    ``folded[m]`` (when present) is their product ``output_proj[m] @ value_proj[m]``.
    """

    value_proj: np.ndarray
    output_proj: np.ndarray
    folded: Optional[np.ndarray] = None

    def __post_init__(self):
        self.value_proj = np.asarray(self.value_proj, dtype=np.float64)
        self.output_proj = np.asarray(self.output_proj, dtype=np.float64)
        m, dh, d = self.value_proj.shape
        if d % m:
            raise ConfigurationError(f"D={d} is not divisible by M={m}")
        if dh != d // m:
            raise ConfigurationError(f"value projection must map D={d} to D/M={d // m}, got {dh}")
        if self.output_proj.shape != (m, d, dh):
            raise ConfigurationError(
                f"output projection must be {(m, d, dh)}, got {self.output_proj.shape}")
        if self.folded is not None:
            self.folded = np.asarray(self.folded, dtype=np.float64)
            if self.folded.shape != (m, d, d):
                raise ConfigurationError(f"folded projection must be {(m, d, d)}, got {self.folded.shape}")
            product = np.matmul(self.output_proj, self.value_proj)
            scale = max(float(np.abs(product).max()), 1e-300)
            if float(np.abs(self.folded - product).max()) > 1e-6 * scale:
                raise ConfigurationError("folded projection differs from output_proj @ value_proj")

    @property
    def heads(self) -> int:
        return self.value_proj.shape[0]

    @property
    def channels(self) -> int:
        return self.value_proj.shape[2]


@dataclass
class AttentionOutput:
    ids: np.ndarray
    out: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.out = np.asarray(self.out)
        if self.out.shape[0] != self.ids.shape[0]:
            raise ConfigurationError("one output row per id is required")

    def __len__(self):
        return int(self.ids.shape[0])

    def by_id(self) -> dict:
        return {int(i): row for i, row in zip(self.ids, self.out)}


def _bilinear_taps(x, y):
    """Yield ``(dy, dx, yy, xx, weight)`` for the 2x2 taps around ``(x, y)``."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            yield dy, dx, y0 + dy, x0 + dx, wy * wx


def sample_level(data: np.ndarray, x, y) -> np.ndarray:
    """Zero-padded bilinear samples of one ``(H, W, D)`` level at pixel coords.

    ``x`` and ``y`` are equally shaped float arrays; the result has shape
    ``x.shape + (D,)`` in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w, d = data.shape
    out = np.zeros(x.shape + (d,), dtype=np.float64)
    for _, _, yy, xx, wt in _bilinear_taps(x, y):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        if valid.any():
            out[valid] += wt[valid, None] * data[yy[valid], xx[valid]]
    return out


def bilinear_sample(feature_map: np.ndarray, coord) -> np.ndarray:
    """Sample ``feature_map`` (H, W, D) at fractional pixel ``coord = (x, y)``."""
    x, y = (float(c) for c in coord)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise RejectedInputError(f"non-finite sampling coordinate {coord!r}")
    return sample_level(np.asarray(feature_map), np.array([x]), np.array([y]))[0]


def sample_pixel_coords(ref_points, offsets, dims: PyramidDims):
    """Pixel coordinates of every sample, one ``(x, y)`` pair of arrays per level.

    ``ref_points`` is ``(n, 2)`` and ``offsets`` ``(n, M, L, K, 2)``; each
    returned array is ``(n, M, K)``.
    """
    ref_points = np.asarray(ref_points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    coords = []
    for lvl, (h, w) in enumerate(dims.shapes):
        sx, sy = w - 1, h - 1
        x = ref_points[:, None, None, 0] * sx + offsets[:, :, lvl, :, 0] * sx
        y = ref_points[:, None, None, 1] * sy + offsets[:, :, lvl, :, 1] * sy
        coords.append((x, y))
    return coords


def softmax_weights(logits) -> np.ndarray:
    """Per-head softmax over the trailing ``(L, K)`` axes of ``(..., M, L, K)`` logits."""
    a = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(a).all():
        raise RejectedInputError("logits must be finite")
    flat = a.reshape(a.shape[:-2] + (-1,))
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(a.shape)


def _check_shapes(pyramid: FeaturePyramid, queries: QueryBatch, weights: ProjectionWeights):
    if pyramid.channels != weights.channels:
        raise ConfigurationError(f"pyramid D={pyramid.channels} but weights D={weights.channels}")
    if len(queries) == 0:
        return
    if queries.heads != weights.heads:
        raise ConfigurationError(f"queries have M={queries.heads} heads but weights have {weights.heads}")
    if queries.levels != len(pyramid.levels):
        raise ConfigurationError(f"queries sample L={queries.levels} levels but pyramid has {len(pyramid.levels)}")


def gather_samples(pyramid: FeaturePyramid, ref_point, offsets) -> np.ndarray:
    """Bilinear samples for one query: ``(M, L, K, D)`` float64."""
    dims = pyramid.dims
    coords = sample_pixel_coords(np.asarray(ref_point)[None], np.asarray(offsets)[None], dims)
    m, n_lvl, k = np.asarray(offsets).shape[:3]
    samples = np.empty((m, n_lvl, k, dims.channels), dtype=np.float64)
    for lvl, (x, y) in enumerate(coords):
        samples[:, lvl] = sample_level(pyramid.levels[lvl], x[0], y[0])
    return samples


def fold_projections(weights: ProjectionWeights) -> ProjectionWeights:
    folded = np.einsum("mde,mef->mdf", weights.output_proj, weights.value_proj)
    return ProjectionWeights(weights.value_proj, weights.output_proj, folded)


def msdeformattn_reference(pyramid: FeaturePyramid, queries: QueryBatch,
                           weights: ProjectionWeights) -> AttentionOutput:
    """Two-stage evaluation: value projection per sample, then output projection per head."""
    _check_shapes(pyramid, queries, weights)
    n, d = len(queries), pyramid.channels
    out = np.zeros((n, d), dtype=np.float64)
    for q in range(n):
        samples = gather_samples(pyramid, queries.ref_points[q], queries.offsets[q])
        attn = softmax_weights(queries.logits[q])
        for m in range(weights.heads):
            projected = np.einsum("ed,lkd->lke", weights.value_proj[m], samples[m])
            head = np.einsum("lk,lke->e", attn[m], projected)
            out[q] += weights.output_proj[m] @ head
    return AttentionOutput(queries.ids.copy(), out)


def msdeformattn_fused(pyramid: FeaturePyramid, queries: QueryBatch,
                       weights: ProjectionWeights) -> AttentionOutput:
    """Single pass per query: accumulate ``A * x`` into an ``(M, D)`` workspace, then apply ``W''``."""
    if weights.folded is None:
        raise ConfigurationError("fused path requires folded projections (call fold_projections first)")
    _check_shapes(pyramid, queries, weights)
    n, d = len(queries), pyramid.channels
    out = np.zeros((n, d), dtype=np.float64)
    for q in range(n):
        samples = gather_samples(pyramid, queries.ref_points[q], queries.offsets[q])
        attn = softmax_weights(queries.logits[q])
        workspace = np.einsum("mlk,mlkd->md", attn, samples)
        out[q] = np.einsum("mfd,md->f", weights.folded, workspace)
    return AttentionOutput(queries.ids.copy(), out)


def random_weights(rng: np.random.Generator, channels: int, heads: int, low=-1.0, high=1.0,
                   fold=True) -> ProjectionWeights:
    dh = channels // heads
    w = ProjectionWeights(rng.uniform(low, high, (heads, dh, channels)),
                          rng.uniform(low, high, (heads, channels, dh)))
    return fold_projections(w) if fold else w
