import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformcache import oracles
from deformcache.attention import AttentionOutput, msdeformattn_fused, random_weights
from deformcache.errors import ConfigurationError, DataCorruptionError, RejectedInputError
from deformcache.workload import (DESK_LEVELS, FULL_SCALE_LEVELS, IndexRemap, WorkloadSpec, build_workload,
                                  burst_length_stats, generate_workload, kept_count, prune_topk,
                                  query_scores, scatter_restore)


def test_full_scale_dense_encoder_count():
    spec = WorkloadSpec(mode="dense_encoder", levels=FULL_SCALE_LEVELS, channels=8, heads=2, points=1)
    assert spec.dims.total_locations == 20097
    _, q = generate_workload(spec)
    assert len(q) == 20097


def test_dense_count_is_sum_of_level_areas():
    spec = WorkloadSpec(mode="dense_encoder", levels=((5, 7), (3, 2)), channels=4, heads=2)
    assert len(generate_workload(spec)[1]) == 35 + 6


def test_grid_single_level():
    spec = WorkloadSpec(mode="decoder", distribution="grid", levels=((4, 4),), channels=4, heads=2)
    _, q = generate_workload(spec)
    assert len(q) == 16
    assert sorted(map(tuple, (q.ref_points * 3).round(9).tolist())) == \
        [(float(x), float(y)) for x in range(4) for y in range(4)]


def test_clustered_generation_is_deterministic():
    spec = WorkloadSpec(clusters=4, seed=11)
    (p1, q1), (p2, q2) = generate_workload(spec), generate_workload(spec)
    for a, b in zip(p1.levels, p2.levels):
        np.testing.assert_array_equal(a, b)
    for name in ("ids", "ref_points", "offsets", "logits"):
        np.testing.assert_array_equal(getattr(q1, name), getattr(q2, name))
    assert not np.array_equal(generate_workload(WorkloadSpec(clusters=4, seed=12))[1].ref_points,
                              q1.ref_points)


def test_offsets_stay_in_envelope():
    spec = WorkloadSpec(offset_envelope_px=1.5, seed=2)
    _, q = generate_workload(spec)
    for lvl, (h, w) in enumerate(spec.levels):
        assert np.abs(q.offsets[:, :, lvl, :, 0] * (w - 1)).max() <= 1.5
        assert np.abs(q.offsets[:, :, lvl, :, 1] * (h - 1)).max() <= 1.5


@pytest.mark.parametrize("bad", [dict(rho=0), dict(rho=1.5), dict(mode="x"), dict(n_queries=0),
                                 dict(distribution="ring"), dict(channels=30, heads=4)])
def test_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        WorkloadSpec(**bad)


def test_kept_counts_at_full_scale():
    assert [kept_count(20097, r) for r in (1.0, 0.5, 0.1)] == [20097, 10049, 2010]


def test_prune_keep_all_is_identity():
    _, q = generate_workload(WorkloadSpec(n_queries=10))
    packed, remap = prune_topk(q, np.random.default_rng(0).random(10), 10)
    np.testing.assert_array_equal(packed.ids, q.ids)
    np.testing.assert_array_equal(remap.inverse, np.arange(10))


def test_prune_top_two():
    _, q = generate_workload(WorkloadSpec(n_queries=5))
    packed, remap = prune_topk(q, np.arange(5.0), 2)
    assert remap.kept_ids.tolist() == [4, 3]
    assert packed.ids.tolist() == [4, 3]


def test_prune_ties_to_lower_id():
    _, q = generate_workload(WorkloadSpec(n_queries=5))
    packed, _ = prune_topk(q, [1.0, 2.0, 2.0, 0.5, 2.0], 2)
    assert packed.ids.tolist() == [1, 2]


def test_prune_rejects_bad_input():
    _, q = generate_workload(WorkloadSpec(n_queries=5))
    with pytest.raises(RejectedInputError):
        prune_topk(q, np.ones(5), 0)
    with pytest.raises(RejectedInputError):
        prune_topk(q, np.ones(5), 6)
    with pytest.raises(RejectedInputError):
        prune_topk(q, [1, 2, np.nan, 3, 4], 2)


def test_sparse_encoder_build_counts():
    for rho in (1.0, 0.5, 0.1):
        spec = WorkloadSpec(mode="sparse_encoder", rho=rho, seed=1)
        _, q, remap = build_workload(spec)
        assert len(q) == len(remap) == kept_count(5440, rho)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000))
def test_remap_forward_inverse(keep, seed):
    _, q = generate_workload(WorkloadSpec(n_queries=60, seed=seed % 50))
    _, remap = prune_topk(q, query_scores(q, "random", seed), keep)
    for p, o in enumerate(remap.inverse):
        assert remap.forward[int(o)] == p
    assert len(set(remap.kept_ids.tolist())) == keep


def test_scatter_restore_examples():
    ids = np.array([3, 1, 2])
    out = AttentionOutput(ids, np.arange(6.0).reshape(3, 2))
    same = scatter_restore(out, IndexRemap.identity(ids))
    np.testing.assert_array_equal(same.ids, ids)
    rev = IndexRemap(np.array([4, 3, 2, 1]), np.array([4, 3, 2, 1]))
    back = scatter_restore(AttentionOutput([4, 3, 2, 1], np.arange(4.0)[:, None]), rev)
    assert back.ids.tolist() == [1, 2, 3, 4]
    assert back.out[:, 0].tolist() == [3.0, 2.0, 1.0, 0.0]
    with pytest.raises(DataCorruptionError):
        scatter_restore(AttentionOutput([99], np.zeros((1, 1))), rev)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_pruning_is_exact_per_id(keep, seed):
    spec = WorkloadSpec(n_queries=40, seed=seed % 100, channels=8, heads=2, points=2)
    pyramid, q = generate_workload(spec)
    w = random_weights(np.random.default_rng(seed), 8, 2)
    full = msdeformattn_fused(pyramid, q, w).by_id()
    packed, remap = prune_topk(q, query_scores(q, "saliency", seed), keep)
    restored = scatter_restore(msdeformattn_fused(pyramid, packed, w), remap)
    # sorted back into original batch order, no survivor lost, values bit-identical
    assert restored.ids.tolist() == sorted(remap.kept_ids.tolist())
    for i, row in restored.by_id().items():
        np.testing.assert_array_equal(row, full[i])


def test_burst_stats_examples():
    assert burst_length_stats(IndexRemap.identity([0, 1]), [np.arange(5), np.arange(5, 9)]) == \
        {"runs": 1, "mean_run": 9.0}
    alt = [np.array([0, 100, 200]), np.array([300])]
    assert burst_length_stats(IndexRemap.identity([0, 1]), alt)["mean_run"] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_burst_stats_match_scan(seed):
    rng = np.random.default_rng(seed)
    fps = [np.unique(rng.integers(0, 30, rng.integers(1, 8))) for _ in range(10)]
    perm = rng.permutation(10)[:6]
    remap = IndexRemap(perm, perm)
    stream = np.concatenate([fps[o] for o in perm]).tolist()
    runs = oracles.run_lengths(stream)
    got = burst_length_stats(remap, fps)
    assert got["runs"] == len(runs)
    assert got["mean_run"] == pytest.approx(np.mean(runs))


def test_desk_levels_total():
    assert WorkloadSpec(levels=DESK_LEVELS).dims.total_locations == 5440
