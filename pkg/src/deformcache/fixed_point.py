"""Bit-true mixed-precision model of the fused attention pass.

Two arithmetic paths share the pass:

* linear path (bilinear interpolation and the folded output projection):
  8-bit weights, 8-bit activations, 18-bit saturating accumulators;
* aggregation path (softmax and attention-weighted accumulation): 16-bit
  weights, 8-bit activations, 28-bit saturating accumulators.

Scales are per-tensor, symmetric and real valued. All integer rounding is
round-half-to-even. The exponential inside the softmax is a (2,2) Pade
approximant evaluated on ``[-ln 2, 0]`` after ``e^x = 2^k * e^r`` reduction.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .attention import (AttentionOutput, FeaturePyramid, ProjectionWeights, QueryBatch,
                        _bilinear_taps, _check_shapes, sample_level, sample_pixel_coords)
from .errors import ConfigurationError, ContractViolation, QuantOverflowError, RejectedInputError


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True
    saturating: bool = True

    def __post_init__(self):
        if not 0 < self.frac_bits < self.total_bits <= 32:
            raise ConfigurationError(
                f"need 0 < frac_bits < total_bits <= 32, got {self.frac_bits}/{self.total_bits}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits


@dataclass(frozen=True)
class PrecisionPlan:
    """Formats for the two arithmetic paths (all saturating by default)."""

    weight_fmt_linear: FixedPointFormat = FixedPointFormat(8, 7)
    act_fmt_linear: FixedPointFormat = FixedPointFormat(8, 7)
    accum_fmt_linear: FixedPointFormat = FixedPointFormat(18, 14)
    # softmax weights are non-negative; unsigned Q1.15 keeps 1.0 representable
    weight_fmt_agg: FixedPointFormat = FixedPointFormat(16, 15, signed=False)
    act_fmt_agg: FixedPointFormat = FixedPointFormat(8, 7)
    accum_fmt_agg: FixedPointFormat = FixedPointFormat(28, 22)

    def __post_init__(self):
        expected = {
            "weight_fmt_linear": 8, "act_fmt_linear": 8, "accum_fmt_linear": 18,
            "weight_fmt_agg": 16, "act_fmt_agg": 8, "accum_fmt_agg": 28,
        }
        for name, bits in expected.items():
            fmt = getattr(self, name)
            if fmt.total_bits != bits:
                raise ConfigurationError(f"{name} must be {bits}-bit, got {fmt.total_bits}")

    @classmethod
    def non_saturating(cls) -> "PrecisionPlan":
        """Same widths with every format raising on overflow instead of clamping."""
        base = cls()
        kw = {}
        for name in ("weight_fmt_linear", "act_fmt_linear", "accum_fmt_linear",
                     "weight_fmt_agg", "act_fmt_agg", "accum_fmt_agg"):
            f = getattr(base, name)
            kw[name] = FixedPointFormat(f.total_bits, f.frac_bits, f.signed, saturating=False)
        return cls(**kw)


@dataclass
class QuantizedTensor:
    values: np.ndarray
    scale: float
    format: FixedPointFormat

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


@dataclass
class SaturationStats:
    """Per-stage count of values clamped at a format limit."""

    counts: Counter = field(default_factory=Counter)

    def add(self, stage: str, n: int):
        if n:
            self.counts[stage] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _limit(values, fmt: FixedPointFormat, stage: str, stats: Optional[SaturationStats]):
    over = (values > fmt.qmax) | (values < fmt.qmin)
    if over.any():
        if not fmt.saturating:
            raise QuantOverflowError(stage, fmt.qmax)
        if stats is not None:
            stats.add(stage, np.count_nonzero(over))
        values = np.clip(values, fmt.qmin, fmt.qmax)
    return values


def div_round_half_even(num, den):
    """Integer ``num / den`` rounded half-to-even; ``den`` must be positive."""
    num = np.asarray(num, dtype=np.int64)
    den = np.asarray(den, dtype=np.int64)
    q = num // den
    twice_rem = 2 * (num - q * den)
    up = (twice_rem > den) | ((twice_rem == den) & (q % 2 == 1))
    return q + up


def shift_round_half_even(values, shift):
    """Arithmetic right shift with round-half-to-even; ``shift`` may be an array."""
    values = np.asarray(values, dtype=np.int64)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.int64), values.shape)
    out = np.zeros(values.shape, dtype=np.int64)
    small = shift < 62
    s = shift[small]
    out[small] = div_round_half_even(values[small], np.left_shift(np.int64(1), s))
    return out


def quantize(tensor, fmt: FixedPointFormat, scale: Union[str, float] = "max_abs",
             stage: str = "quantize", stats: Optional[SaturationStats] = None) -> QuantizedTensor:
    """Symmetric per-tensor quantization with round-half-to-even.

    ``scale="max_abs"`` maps the largest magnitude onto ``fmt.qmax``; a float
    uses that scale as given.
    """
    t = np.asarray(tensor, dtype=np.float64)
    if not np.isfinite(t).all():
        raise RejectedInputError("cannot quantize non-finite values")
    if isinstance(scale, str):
        if scale != "max_abs":
            raise ConfigurationError(f"unknown scale policy {scale!r}")
        if t.size == 0:
            raise RejectedInputError("max-abs scaling of an empty tensor")
        peak = float(np.abs(t).max())
        scale = peak / fmt.qmax if peak > 0 else fmt.lsb
    scale = float(scale)
    if not scale > 0:
        raise ConfigurationError(f"scale must be positive, got {scale}")
    q = np.rint(t / scale).astype(np.int64)
    return QuantizedTensor(_limit(q, fmt, stage, stats), scale, fmt)


def requantize(acc, ratio: float, fmt: FixedPointFormat, stage: str,
               stats: Optional[SaturationStats] = None) -> np.ndarray:
    """Rescale integer accumulators by ``ratio`` (old scale / new scale) into ``fmt``."""
    q = np.rint(np.asarray(acc, dtype=np.float64) * ratio).astype(np.int64)
    return _limit(q, fmt, stage, stats)


def saturating_add(acc, term, fmt: FixedPointFormat, stage: str,
                   stats: Optional[SaturationStats] = None) -> np.ndarray:
    return _limit(acc + term, fmt, stage, stats)


# ---------------------------------------------------------------------------
# exponential

def _ln2_fixed(frac_bits: int) -> int:
    return int(round(math.log(2.0) * (1 << frac_bits)))


def pade_exp(r, fmt: FixedPointFormat = PrecisionPlan().accum_fmt_agg) -> np.ndarray:
    """(2,2) Pade approximant of ``e^r`` for fixed-point ``r`` in ``[-ln 2, 0]``.

    ``r`` holds integers with ``fmt.frac_bits`` fractional bits; the result
    uses the same format, so ``r = 0`` returns exactly ``1 << frac_bits``.
    """
    f = fmt.frac_bits
    r = np.asarray(r, dtype=np.int64)
    if (r > 0).any() or (r < -_ln2_fixed(f)).any():
        raise ContractViolation("pade_exp argument outside the reduced range [-ln 2, 0]")
    one = np.int64(1) << f
    r2 = shift_round_half_even(r * r, f)
    num = 12 * one + 6 * r + r2
    den = 12 * one - 6 * r + r2
    return div_round_half_even(num << f, den)


def exp_fixed(x, fmt: FixedPointFormat = PrecisionPlan().accum_fmt_agg):
    """Range-reduced exponential of non-positive fixed-point ``x``.

    Returns ``(mantissa, k)`` with ``e^x ~= mantissa * 2^(k - frac_bits)`` where
    ``k <= 0`` and ``mantissa`` is the Pade value of the reduced argument.
    """
    x = np.asarray(x, dtype=np.int64)
    if (x > 0).any():
        raise ContractViolation("exp_fixed expects non-positive arguments")
    ln2 = _ln2_fixed(fmt.frac_bits)
    k = -((-x) // ln2)
    r = x - k * ln2
    return pade_exp(r, fmt), k


def fixed_exp(x, fmt: FixedPointFormat = PrecisionPlan().accum_fmt_agg) -> np.ndarray:
    """Float convenience wrapper: quantize ``x <= 0``, run :func:`exp_fixed`, rescale."""
    x_int = np.rint(np.asarray(x, dtype=np.float64) * (1 << fmt.frac_bits)).astype(np.int64)
    mant, k = exp_fixed(np.minimum(x_int, 0), fmt)
    return mant.astype(np.float64) * np.exp2(k.astype(np.float64) - fmt.frac_bits)


def quantized_softmax(logits, plan: PrecisionPlan = PrecisionPlan(),
                      stats: Optional[SaturationStats] = None) -> QuantizedTensor:
    """Per-head softmax of 8-bit logits ``(..., M, L, K)`` into the 16-bit weight format.

    Float logits are quantized first (max-abs). The max-subtracted logits are
    moved into the 28-bit accumulator format, exponentiated there, summed with
    saturation and divided, giving weights with scale ``2^-frac_bits``.
    """
    if not isinstance(logits, QuantizedTensor):
        logits = quantize(logits, plan.act_fmt_agg, stage="logits", stats=stats)
    acc_fmt, out_fmt = plan.accum_fmt_agg, plan.weight_fmt_agg
    shape = logits.values.shape
    flat = logits.values.reshape(shape[:-2] + (-1,))
    diff = flat - flat.max(axis=-1, keepdims=True)
    x = np.rint(diff * (logits.scale * (1 << acc_fmt.frac_bits))).astype(np.int64)
    x = _limit(x, acc_fmt, "softmax_input", stats)
    mant, k = exp_fixed(x, acc_fmt)
    e = shift_round_half_even(mant, -k)
    total = np.zeros(flat.shape[:-1], dtype=np.int64)
    for j in range(flat.shape[-1]):
        total = saturating_add(total, e[..., j], acc_fmt, "softmax_sum", stats)
    a = div_round_half_even(e << out_fmt.frac_bits, total[..., None])
    a = _limit(a, out_fmt, "softmax_out", stats)
    return QuantizedTensor(a.reshape(shape), out_fmt.lsb, out_fmt)


# ---------------------------------------------------------------------------
# fused pass

@dataclass(frozen=True)
class QuantScales:
    """Per-tensor scales of every quantization point in the fused pass.

    ``bilinear`` is the scale of the interpolation weights (1/127 keeps 1.0
    exact in signed 8-bit).
    """

    feature: float
    sample: float
    logit: float
    aggregate: float
    weight: float
    bilinear: float = 1.0 / 127


def _peak_scale(values, fmt: FixedPointFormat) -> float:
    peak = float(np.abs(values).max()) if np.size(values) else 0.0
    return peak / fmt.qmax if peak > 0 else 1.0


def _float_samples(pyramid: FeaturePyramid, queries: QueryBatch) -> np.ndarray:
    coords = sample_pixel_coords(queries.ref_points, queries.offsets, pyramid.dims)
    n, m, n_lvl, k = queries.logits.shape
    samples = np.empty((n, m, n_lvl, k, pyramid.channels))
    for lvl, (x, y) in enumerate(coords):
        samples[:, :, lvl] = sample_level(pyramid.levels[lvl], x, y)
    return samples


def calibrate_scales(pyramid: FeaturePyramid, queries: QueryBatch, weights: ProjectionWeights,
                     plan: PrecisionPlan = PrecisionPlan()) -> QuantScales:
    """Max-abs calibration of every stage from the floating-point pass over ``queries``."""
    from .attention import softmax_weights

    samples = _float_samples(pyramid, queries)
    workspace = np.einsum("nmlk,nmlkd->nmd", softmax_weights(queries.logits), samples)
    return QuantScales(
        feature=_peak_scale(np.concatenate([lvl.ravel() for lvl in pyramid.levels]), plan.act_fmt_linear),
        sample=_peak_scale(samples, plan.act_fmt_linear),
        logit=_peak_scale(queries.logits, plan.act_fmt_agg),
        aggregate=_peak_scale(workspace, plan.act_fmt_linear),
        weight=_peak_scale(weights.folded, plan.weight_fmt_linear),
    )


def msdeformattn_fused_quantized(pyramid: FeaturePyramid, queries: QueryBatch,
                                 weights: ProjectionWeights, plan: PrecisionPlan = PrecisionPlan(),
                                 scales: Optional[QuantScales] = None,
                                 stats: Optional[SaturationStats] = None) -> AttentionOutput:
    """Fixed-point fused pass; returns dequantized outputs.

    Re-quantization to 8 bits happens after bilinear interpolation and after
    the attention-weighted aggregation; every accumulation saturates term by
    term (or raises :class:`QuantOverflowError` on non-saturating formats).
    """
    if weights.folded is None:
        raise ConfigurationError("fused path requires folded projections (call fold_projections first)")
    _check_shapes(pyramid, queries, weights)
    n, d = len(queries), pyramid.channels
    if n == 0:
        return AttentionOutput(queries.ids.copy(), np.zeros((0, d)))
    if scales is None:
        scales = calibrate_scales(pyramid, queries, weights, plan)
    m_heads, n_lvl, k_pts = queries.logits.shape[1:]

    # (a) bilinear on the linear path, re-quantized to 8 bits
    feats = [quantize(lvl, plan.act_fmt_linear, scales.feature, "feature", stats).values
             for lvl in pyramid.levels]
    coords = sample_pixel_coords(queries.ref_points, queries.offsets, pyramid.dims)
    samples = np.empty((n, m_heads, n_lvl, k_pts, d), dtype=np.int64)
    to_sample = scales.feature * scales.bilinear / scales.sample
    for lvl, (x, y) in enumerate(coords):
        h, w, _ = feats[lvl].shape
        acc = np.zeros(x.shape + (d,), dtype=np.int64)
        for _, _, yy, xx, wt in _bilinear_taps(x, y):
            w_int = quantize(wt, plan.weight_fmt_linear, scales.bilinear, "bilinear_weight", stats).values
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            taps = np.zeros(x.shape + (d,), dtype=np.int64)
            taps[valid] = feats[lvl][yy[valid], xx[valid]]
            acc = saturating_add(acc, w_int[..., None] * taps, plan.accum_fmt_linear, "bilinear", stats)
        samples[:, :, lvl] = requantize(acc, to_sample, plan.act_fmt_linear, "bilinear_requant", stats)

    # aggregation path: 16-bit softmax weights x 8-bit samples into 28-bit accumulators
    logits = quantize(queries.logits, plan.act_fmt_agg, scales.logit, "logits", stats)
    attn = quantized_softmax(logits, plan, stats)
    acc = np.zeros((n, m_heads, d), dtype=np.int64)
    for lvl in range(n_lvl):
        for k in range(k_pts):
            term = attn.values[:, :, lvl, k, None] * samples[:, :, lvl, k]
            acc = saturating_add(acc, term, plan.accum_fmt_agg, "aggregation", stats)
    # (b) re-quantize the workspace to 8 bits before the projection
    to_agg = attn.scale * scales.sample / scales.aggregate
    workspace = requantize(acc, to_agg, plan.act_fmt_linear, "aggregation_requant", stats)

    # folded projection on the linear path
    w_q = quantize(weights.folded, plan.weight_fmt_linear, scales.weight, "projection_weight", stats).values
    out = np.zeros((n, d), dtype=np.int64)
    for m in range(m_heads):
        for j in range(d):
            term = workspace[:, m, j, None] * w_q[None, m, :, j]
            out = saturating_add(out, term, plan.accum_fmt_linear, "projection", stats)
    return AttentionOutput(queries.ids.copy(), out.astype(np.float64) * (scales.weight * scales.aggregate))
