import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformcache import oracles
from deformcache.attention import (FeaturePyramid, ProjectionWeights, QueryBatch, bilinear_sample,
                                   fold_projections, msdeformattn_fused, msdeformattn_reference,
                                   random_weights, sample_level, softmax_weights)
from deformcache.errors import ConfigurationError, RejectedInputError
from deformcache.verify import max_relative_error, random_instance


def _identity_weights(d, m):
    dh = d // m
    eye = np.eye(d)
    value = np.stack([eye[i * dh:(i + 1) * dh] for i in range(m)])
    out = np.stack([eye[:, i * dh:(i + 1) * dh] for i in range(m)])
    return ProjectionWeights(value, out)


# -- bilinear sampling ------------------------------------------------------

def test_integer_coordinate_returns_stored_vector():
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=(8, 6, 5))
    np.testing.assert_array_equal(bilinear_sample(fmap, (3, 5)), fmap[5, 3])


def test_midpoint_of_four_taps():
    fmap = np.zeros((2, 2, 1))
    fmap[0, 0, 0], fmap[0, 1, 0], fmap[1, 0, 0], fmap[1, 1, 0] = 0, 1, 2, 3
    assert bilinear_sample(fmap, (0.5, 0.5))[0] == pytest.approx(1.5)


def test_corner_outside_keeps_quarter_of_origin():
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(4, 4, 3))
    np.testing.assert_allclose(bilinear_sample(fmap, (-0.5, -0.5)), 0.25 * fmap[0, 0])


@pytest.mark.parametrize("coord", [(math.nan, 0.0), (0.0, math.inf)])
def test_non_finite_coordinate_rejected(coord):
    with pytest.raises(RejectedInputError):
        bilinear_sample(np.zeros((2, 2, 1)), coord)


def test_sample_fully_outside_is_zero():
    fmap = np.ones((4, 4, 2))
    out = sample_level(fmap, np.array([-1.5, 10.0, 2.0]), np.array([0.0, 1.0, -3.0]))
    assert not out.any()


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 6), st.floats(0, 4), st.integers(0, 1000))
def test_bilinear_matches_loop_oracle_and_partition_of_unity(x, y, seed):
    rng = np.random.default_rng(seed)
    fmap = rng.normal(size=(5, 7, 3))
    np.testing.assert_allclose(bilinear_sample(fmap, (x, y)), oracles.bilinear_loops(fmap, x, y),
                               atol=1e-12)
    # a constant map reproduces the constant wherever all four taps are in range
    if x <= 5 and y <= 3:
        assert bilinear_sample(np.ones((5, 7, 1)), (x, y))[0] == pytest.approx(1.0)


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax_weights(np.zeros((2, 4, 4))), 1 / 16)


def test_softmax_closed_form():
    a = softmax_weights(np.array([[[0.0, math.log(3.0)]]]))
    np.testing.assert_allclose(a.ravel(), [0.25, 0.75], rtol=1e-12)


def test_softmax_matches_decimal_oracle():
    rng = np.random.default_rng(2)
    logits = rng.normal(0, 3, (1, 4, 4))
    want = oracles.softmax_decimal(logits.ravel())
    np.testing.assert_allclose(softmax_weights(logits).ravel(), want, rtol=0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_sums_to_one_per_head(seed):
    rng = np.random.default_rng(seed)
    a = softmax_weights(rng.normal(0, 20, (5, 3, 4, 4)))
    np.testing.assert_allclose(a.sum(axis=(-1, -2)), 1.0, atol=1e-6)


# -- projections ------------------------------------------------------------

def test_fold_identity_blocks():
    d, m = 8, 2
    w = fold_projections(_identity_weights(d, m))
    for i in range(m):
        expect = np.zeros((d, d))
        sl = slice(i * d // m, (i + 1) * d // m)
        expect[sl, sl] = np.eye(d // m)
        np.testing.assert_array_equal(w.folded[i], expect)


def test_fold_matches_loop_matmul():
    rng = np.random.default_rng(3)
    w = random_weights(rng, 8, 2)
    for m in range(2):
        want = np.array(oracles.matmul_loops(w.output_proj[m].tolist(), w.value_proj[m].tolist()))
        np.testing.assert_allclose(w.folded[m], want, rtol=1e-7, atol=1e-12)
    assert w.value_proj.shape == (2, 4, 8) and w.output_proj.shape == (2, 8, 4)


def test_fold_zero_value_projection():
    w = fold_projections(ProjectionWeights(np.zeros((2, 4, 8)), np.ones((2, 8, 4))))
    assert not w.folded.any()


def test_inconsistent_folded_weights_rejected():
    rng = np.random.default_rng(4)
    w = random_weights(rng, 8, 2)
    with pytest.raises(ConfigurationError):
        ProjectionWeights(w.value_proj, w.output_proj, w.folded + 1.0)


# -- full kernels -----------------------------------------------------------

def _batch(n, m, levels, k, rng, zero=False):
    off = np.zeros((n, m, levels, k, 2)) if zero else rng.uniform(-0.2, 0.2, (n, m, levels, k, 2))
    logits = np.zeros((n, m, levels, k)) if zero else rng.normal(size=(n, m, levels, k))
    return QueryBatch(np.arange(n), rng.uniform(0, 1, (n, 2)), off, logits)


def test_constant_pyramid_uniform_weights():
    rng = np.random.default_rng(5)
    d, m = 8, 2
    c = rng.normal(size=d)
    pyramid = FeaturePyramid([np.broadcast_to(c, (6, 6, d)).copy(), np.broadcast_to(c, (3, 3, d)).copy()])
    queries = _batch(5, m, 2, 3, rng, zero=True)
    w = random_weights(rng, d, m)
    want = sum(w.folded[i] @ c for i in range(m))
    for fn in (msdeformattn_reference, msdeformattn_fused):
        np.testing.assert_allclose(fn(pyramid, queries, w).out, np.tile(want, (5, 1)), rtol=1e-9)


def test_single_sample_identity_projection_equals_bilinear():
    rng = np.random.default_rng(6)
    level = rng.normal(size=(7, 9, 4))
    queries = _batch(3, 1, 1, 1, rng)
    out = msdeformattn_reference(FeaturePyramid([level]), queries, _identity_weights(4, 1)).out
    for q in range(3):
        u, v = queries.ref_points[q]
        du, dv = queries.offsets[q, 0, 0, 0]
        np.testing.assert_allclose(out[q], bilinear_sample(level, ((u + du) * 8, (v + dv) * 6)),
                                   rtol=1e-12)


def test_reference_matches_loop_oracle():
    rng = np.random.default_rng(7)
    pyramid, queries, w = random_instance(rng, channels=8, heads=2, levels=2, points=2, n=4)
    ref = msdeformattn_reference(pyramid, queries, w).out
    fused = msdeformattn_fused(pyramid, queries, w).out
    assert max_relative_error(ref, oracles.msdeformattn_loops(pyramid, queries, w)) <= 1e-6
    assert max_relative_error(fused, ref) <= 1e-5


def test_one_hot_attention_collapses_to_single_sample():
    rng = np.random.default_rng(8)
    pyramid, queries, w = random_instance(rng, channels=8, heads=2, levels=2, points=3, n=1)
    logits = np.full(queries.logits.shape, -1e4)
    logits[0, 1, 1, 2] = 0.0
    logits[0, 0] = 0.0
    logits[0, 0, 0, 0] = 1e4
    q = QueryBatch(queries.ids, queries.ref_points, queries.offsets, logits)
    out = msdeformattn_fused(pyramid, q, w).out[0]
    want = np.zeros(8)
    for m, lvl, k in ((0, 0, 0), (1, 1, 2)):
        h, wd, _ = pyramid.levels[lvl].shape
        u, v = q.ref_points[0]
        du, dv = q.offsets[0, m, lvl, k]
        x = bilinear_sample(pyramid.levels[lvl], ((u + du) * (wd - 1), (v + dv) * (h - 1)))
        want += w.folded[m] @ x
    np.testing.assert_allclose(out, want, rtol=1e-9, atol=1e-12)


def test_empty_batch_gives_empty_output():
    rng = np.random.default_rng(9)
    pyramid, queries, w = random_instance(rng, channels=8, heads=2, levels=2, points=2, n=1)
    empty = queries.take(np.array([], dtype=np.int64))
    out = msdeformattn_fused(pyramid, empty, w)
    assert out.out.shape == (0, 8) and len(out.ids) == 0


def test_fused_requires_folded_weights():
    rng = np.random.default_rng(10)
    pyramid, queries, w = random_instance(rng, channels=8, heads=2, levels=2, points=2, n=2)
    with pytest.raises(ConfigurationError):
        msdeformattn_fused(pyramid, queries, ProjectionWeights(w.value_proj, w.output_proj))


def test_shape_mismatch_is_configuration_error():
    rng = np.random.default_rng(11)
    pyramid, queries, _ = random_instance(rng, channels=8, heads=2, levels=2, points=2, n=2)
    with pytest.raises(ConfigurationError):
        msdeformattn_reference(pyramid, queries, random_weights(rng, 8, 4))
    with pytest.raises(ConfigurationError):
        msdeformattn_reference(pyramid, queries, random_weights(rng, 16, 2))


def test_query_batch_invariants():
    rng = np.random.default_rng(12)
    with pytest.raises(ConfigurationError):
        QueryBatch([0, 0], rng.uniform(size=(2, 2)), np.zeros((2, 1, 1, 1, 2)), np.zeros((2, 1, 1, 1)))
    with pytest.raises(RejectedInputError):
        QueryBatch([0], [[1.5, 0.2]], np.zeros((1, 1, 1, 1, 2)), np.zeros((1, 1, 1, 1)))
    with pytest.raises(ConfigurationError):
        QueryBatch([0], [[0.5, 0.2]], np.zeros((1, 1, 1, 2, 2)), np.zeros((1, 1, 1, 1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_order_equivariance(seed):
    rng = np.random.default_rng(seed)
    pyramid, queries, w = random_instance(rng)
    perm = rng.permutation(len(queries))
    base = msdeformattn_fused(pyramid, queries, w).by_id()
    shuffled = msdeformattn_fused(pyramid, queries.take(perm), w)
    np.testing.assert_array_equal(shuffled.ids, queries.ids[perm])
    for i, row in shuffled.by_id().items():
        np.testing.assert_array_equal(row, base[i])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fused_equals_reference_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    pyramid, queries, w = random_instance(rng)
    ref = msdeformattn_reference(pyramid, queries, w).out
    fused = msdeformattn_fused(pyramid, queries, w).out
    assert max_relative_error(fused, ref) <= 1e-5
