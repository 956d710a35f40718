"""Slow, independent re-implementations used to cross-check the fast paths.

Nothing here calls into the vectorized kernels; each oracle is written from
the defining formula with explicit loops, Python integers, sets or
arbitrary-precision decimals.
"""

from __future__ import annotations

import itertools
import math
from decimal import Decimal, getcontext

import numpy as np


# -- attention ---------------------------------------------------------------

def bilinear_loops(level, x, y):
    h, w, d = level.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(d)
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                wt = (1 - abs(x - xx)) * (1 - abs(y - yy))
                out = out + wt * level[yy, xx]
    return out


def softmax_decimal(values, digits=40):
    """Softmax of a flat sequence in ``digits``-digit decimal arithmetic."""
    getcontext().prec = digits
    ds = [Decimal(repr(float(v))) for v in values]
    e = [d.exp() for d in ds]
    total = sum(e)
    return [float(v / total) for v in e]


def msdeformattn_loops(pyramid, queries, weights):
    """Direct evaluation of sum_m W_m [sum_l sum_k A W'_m x(p + dp)] one sample at a time."""
    n = len(queries)
    m_heads, n_lvl, k_pts = queries.logits.shape[1:]
    d = pyramid.levels[0].shape[2]
    out = np.zeros((n, d))
    for q in range(n):
        u, v = queries.ref_points[q]
        for m in range(m_heads):
            a = softmax_decimal(queries.logits[q, m].ravel())
            head = np.zeros(d // m_heads)
            for lvl in range(n_lvl):
                h, w, _ = pyramid.levels[lvl].shape
                for k in range(k_pts):
                    du, dv = queries.offsets[q, m, lvl, k]
                    x = u * (w - 1) + du * (w - 1)
                    y = v * (h - 1) + dv * (h - 1)
                    val = bilinear_loops(pyramid.levels[lvl], x, y)
                    head = head + a[lvl * k_pts + k] * (weights.value_proj[m] @ val)
            out[q] = out[q] + weights.output_proj[m] @ head
    return out


def matmul_loops(a, b):
    rows, inner = len(a), len(a[0])
    cols = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(inner)) for j in range(cols)] for i in range(rows)]


# -- fixed point -------------------------------------------------------------

def exp_decimal(x, digits=40):
    getcontext().prec = digits
    return float(Decimal(repr(float(x))).exp())


def _rne_div(num, den):
    q, r = divmod(num, den)
    if 2 * r > den or (2 * r == den and q % 2):
        q += 1
    return q


def _clamp(v, lo, hi, stage, stats):
    if v < lo or v > hi:
        stats[stage] = stats.get(stage, 0) + 1
        return min(max(v, lo), hi)
    return v


def fused_quantized_scalar(pyramid, queries, weights, scales):
    """Integer-by-integer model of the default precision plan.

    Mirrors the accumulation order of the vectorized path so saturation
    events line up; returns ``(outputs, saturation_counts)``.
    """
    stats = {}
    A8 = (-128, 127)
    A18 = (-(1 << 17), (1 << 17) - 1)
    A28 = (-(1 << 27), (1 << 27) - 1)
    FRAC = 22
    ln2 = int(round(math.log(2.0) * (1 << FRAC)))

    def q(v, s, lim, stage):
        return _clamp(int(round(v / s)), lim[0], lim[1], stage, stats)

    def rshift(v, s):
        return v if s == 0 else _rne_div(v, 1 << s) if s < 62 else 0

    n = len(queries)
    m_heads, n_lvl, k_pts = queries.logits.shape[1:]
    d = pyramid.levels[0].shape[2]
    feats = [[[[q(float(c), scales.feature, A8, "feature") for c in px] for px in row] for row in lvl]
             for lvl in pyramid.levels]
    w_q = [[[q(float(weights.folded[m, i, j]), scales.weight, A8, "projection_weight")
             for j in range(d)] for i in range(d)] for m in range(m_heads)]
    outs = []
    for qi in range(n):
        u, v = (float(c) for c in queries.ref_points[qi])
        lq = [[[q(float(queries.logits[qi, m, l, k]), scales.logit, A8, "logits") for k in range(k_pts)]
               for l in range(n_lvl)] for m in range(m_heads)]
        workspace = []
        for m in range(m_heads):
            # softmax over this head
            flat = [lq[m][l][k] for l in range(n_lvl) for k in range(k_pts)]
            top = max(flat)
            es = []
            for val in flat:
                x = int(round((val - top) * (scales.logit * (1 << FRAC))))
                x = _clamp(x, A28[0], A28[1], "softmax_input", stats)
                k_exp = -((-x) // ln2)
                r = x - k_exp * ln2
                r2 = rshift(r * r, FRAC)
                one = 1 << FRAC
                mant = _rne_div((12 * one + 6 * r + r2) << FRAC, 12 * one - 6 * r + r2)
                es.append(rshift(mant, -k_exp))
            total = 0
            for e in es:
                total = _clamp(total + e, A28[0], A28[1], "softmax_sum", stats)
            attn = [_clamp(_rne_div(e << 15, total), 0, (1 << 16) - 1, "softmax_out", stats) for e in es]
            acc = [0] * d
            for l in range(n_lvl):
                h, w, _ = pyramid.levels[l].shape
                for k in range(k_pts):
                    du, dv = (float(c) for c in queries.offsets[qi, m, l, k])
                    x = u * (w - 1) + du * (w - 1)
                    y = v * (h - 1) + dv * (h - 1)
                    x0, y0 = math.floor(x), math.floor(y)
                    fx, fy = x - x0, y - y0
                    s_acc = [0] * d
                    for dy in (0, 1):
                        for dx in (0, 1):
                            wt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
                            wi = q(wt, scales.bilinear, A8, "bilinear_weight")
                            yy, xx = y0 + dy, x0 + dx
                            inside = 0 <= yy < h and 0 <= xx < w
                            for c in range(d):
                                tap = feats[l][yy][xx][c] if inside else 0
                                s_acc[c] = _clamp(s_acc[c] + wi * tap, A18[0], A18[1], "bilinear", stats)
                    ratio = scales.feature * scales.bilinear / scales.sample
                    sample = [_clamp(int(round(s * ratio)), A8[0], A8[1], "bilinear_requant", stats)
                              for s in s_acc]
                    a_i = attn[l * k_pts + k]
                    for c in range(d):
                        acc[c] = _clamp(acc[c] + a_i * sample[c], A28[0], A28[1], "aggregation", stats)
            ratio = 2.0 ** -15 * scales.sample / scales.aggregate
            workspace.append([_clamp(int(round(a * ratio)), A8[0], A8[1], "aggregation_requant", stats)
                              for a in acc])
        out = [0] * d
        for m in range(m_heads):
            for j in range(d):
                for i in range(d):
                    out[i] = _clamp(out[i] + workspace[m][j] * w_q[m][i][j], A18[0], A18[1],
                                    "projection", stats)
        outs.append([o * (scales.weight * scales.aggregate) for o in out])
    return np.array(outs).reshape(n, d), stats


# -- scheduling and caches ---------------------------------------------------

def greedy_chain(points, window):
    """Plain-list rendition of windowed nearest-neighbour chaining."""
    n = len(points)
    pending = list(range(min(window, n)))
    nxt = min(window, n)
    cur = pending.pop(0)
    order = [cur]
    if nxt < n:
        pending.append(nxt)
        nxt += 1
    while pending:
        best = min(pending, key=lambda j: (abs(points[j][0] - points[cur][0]) +
                                           abs(points[j][1] - points[cur][1]), j))
        pending.remove(best)
        order.append(best)
        cur = best
        if nxt < n:
            pending.append(nxt)
            nxt += 1
    return order


def set_difference_stall(order, footprint_sets, t_fetch):
    sets = [set(int(v) for v in f) for f in footprint_sets]
    return t_fetch * sum(len(sets[b] - sets[a]) for a, b in zip(order, order[1:]))


def optimal_order_by_exhaustion(footprint_sets, t_fetch=1.0):
    """Minimum set-difference stall over all ``n!`` orders; returns ``(cost, order)``."""
    n = len(footprint_sets)
    sets = [set(int(v) for v in f) for f in footprint_sets]
    cost = np.array([[len(sets[b] - sets[a]) for b in range(n)] for a in range(n)], dtype=np.int64)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = cost[perms[:, :-1], perms[:, 1:]].sum(axis=1)
    best = int(np.argmin(totals))
    return t_fetch * int(totals[best]), perms[best].tolist()


def naive_direct_mapped(stream, capacity):
    """Dictionary of set index -> resident line; returns per-access hit flags."""
    resident = {}
    hits = []
    for a in stream:
        a = int(a)
        s = a % capacity
        hits.append(resident.get(s) == a)
        resident[s] = a
    return hits


def enumerate_footprint(ref_point, offsets, shapes):
    u, v = ref_point
    m_heads, n_lvl, k_pts, _ = np.asarray(offsets).shape
    lines = set()
    for m in range(m_heads):
        for l in range(n_lvl):
            h, w = shapes[l]
            for k in range(k_pts):
                x = u * (w - 1) + offsets[m][l][k][0] * (w - 1)
                y = v * (h - 1) + offsets[m][l][k][1] * (h - 1)
                for yy in (math.floor(y), math.floor(y) + 1):
                    for xx in (math.floor(x), math.floor(x) + 1):
                        if 0 <= yy < h and 0 <= xx < w:
                            lines.add((l, yy, xx))
    return lines


def enumerate_region(ref_point, radii, shapes):
    u, v = ref_point
    lines = set()
    for l, ((h, w), r) in enumerate(zip(shapes, radii)):
        cx, cy = u * (w - 1), v * (h - 1)
        for yy in range(h):
            for xx in range(w):
                if math.floor(cy - r) <= yy <= math.ceil(cy + r) and math.floor(cx - r) <= xx <= math.ceil(cx + r):
                    lines.add((l, yy, xx))
    return lines


def pairwise_bank_conflicts(groups, banks):
    total = 0
    for g in groups:
        for (x1, y1), (x2, y2) in itertools.combinations([tuple(t) for t in g], 2):
            if (x1 + 2 * y1) % banks == (x2 + 2 * y2) % banks:
                total += 1
    return total


def run_lengths(stream):
    runs = []
    for a in stream:
        if runs and a == runs[-1][1] + 1:
            runs[-1][1] = a
            runs[-1][2] += 1
        else:
            runs.append([a, a, 1])
    return [r[2] for r in runs]
