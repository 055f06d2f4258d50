import math

import numpy as np
import pytest

from ctrec.retrieval import (aggregate_reports, compute_metrics, hybrid_score, hybrid_scores,
                             popularity_rankings, random_hit_rate, rank_topk)


def test_hybrid_score_examples():
    assert hybrid_score([1, 0], [1, 0], True) == pytest.approx(1.05, abs=1e-15)
    assert hybrid_score([1, 0], [0, 3], True) == 0.0
    assert hybrid_score([1, 0], [0.8, 0.6], True, 0.05) == pytest.approx(0.84, abs=1e-15)
    with pytest.raises(ValueError):
        hybrid_score([0, 0], [1, 0], False)


def test_vectorised_scores_agree_with_scalar():
    rng = np.random.default_rng(0)
    Y, Q = rng.standard_normal((3, 5)), rng.standard_normal((8, 5))
    match = rng.random((3, 8)) < 0.5
    S = hybrid_scores(Y, Q, match)
    for b in range(3):
        for j in range(8):
            assert S[b, j] == pytest.approx(hybrid_score(Y[b], Q[j], match[b, j]), abs=1e-12)


def test_zero_item_vector_is_never_ranked():
    Q = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 0.5]])
    S = hybrid_scores([[1.0, 0.0]], Q, None)
    assert S[0, 1] == -np.inf
    assert list(rank_topk(S[0], 2)) == [0, 2]


def test_rank_examples():
    assert list(rank_topk([0.9, 0.1, 0.5], 2)) == [0, 2]
    assert list(rank_topk([0.3, 0.3, 0.3], 3)) == [0, 1, 2]
    assert list(rank_topk([0.9, 0.1, 0.5], 2, exclude=[0])) == [2, 1]


def test_rank_warns_when_candidates_run_out():
    with pytest.warns(RuntimeWarning):
        out = rank_topk([0.2, 0.4, 0.1], 5, exclude=[1])
    assert list(out) == [0, 2]


def test_rank_matches_exhaustive_sort():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s = rng.integers(0, 20, 50).astype(float)  # plenty of ties
        excl = rng.choice(50, 5, replace=False)
        order = sorted((i for i in range(50) if i not in set(excl)), key=lambda i: (-s[i], i))
        assert list(rank_topk(s, 10, exclude=excl)) == order[:10]


def test_pi_zero_equals_cosine_and_pi_only_lifts_matches():
    rng = np.random.default_rng(2)
    Y, Q = rng.standard_normal((4, 6)), rng.standard_normal((40, 6))
    match = rng.random((4, 40)) < 0.3
    cos = hybrid_scores(Y, Q, None)
    np.testing.assert_array_equal(hybrid_scores(Y, Q, match, 0.0), cos)
    Qpos = np.abs(Q)  # positive cosines: boosting can only raise a matching item
    Ypos = np.abs(Y)
    for b in range(4):
        lo = rank_topk(hybrid_scores(Ypos, Qpos, match, 0.05)[b], 40)
        hi = rank_topk(hybrid_scores(Ypos, Qpos, match, 0.5)[b], 40)
        pos_lo, pos_hi = np.argsort(lo), np.argsort(hi)
        for j in np.flatnonzero(match[b]):
            for k in np.flatnonzero(~match[b]):
                if pos_lo[j] < pos_lo[k]:
                    assert pos_hi[j] < pos_hi[k]


def test_rankings_are_scale_invariant():
    rng = np.random.default_rng(3)
    Y, Q = rng.standard_normal((2, 6)), rng.standard_normal((30, 6))
    match = rng.random((2, 30)) < 0.5
    ref = [list(rank_topk(s, 30)) for s in hybrid_scores(Y, Q, match)]
    scaled = hybrid_scores(3.7 * Y, Q * rng.uniform(0.1, 10, (30, 1)), match)
    assert [list(rank_topk(s, 30)) for s in scaled] == ref


def test_metric_examples():
    rep = compute_metrics({"a": ["x", "y", "t"], "b": ["z"]}, {"a": "t", "b": "q"}, Ks=(10,))
    assert rep["NDCG@10"] == 0.25  # mean of 0.5 and 0
    assert rep.per_user["NDCG@10"][0] == 0.5
    assert rep["HR@10"] == 0.5
    three = compute_metrics([[1, 2, 3], [4, 5, 6], [7, 8, 9]], [1, 6, 0], Ks=(10, 20))
    assert three["HR@10"] == 2 / 3
    assert three["NDCG@10"] == pytest.approx((1.0 + 0.5 + 0.0) / 3, abs=0)
    assert three["NDCG@20"] == three["NDCG@10"]


def test_top_rank_ndcg_equals_hr():
    rng = np.random.default_rng(0)
    targets = rng.integers(0, 5, 100)
    rankings = [[t] + [9] if rng.random() < 0.4 else [9] for t in targets]
    rep = compute_metrics(rankings, list(targets))
    assert rep["NDCG@10"] == rep["HR@10"]


def test_missing_ranking_raises():
    with pytest.raises(KeyError):
        compute_metrics({"a": [1]}, {"a": 1, "b": 2})


def test_metric_mean_is_order_independent():
    rng = np.random.default_rng(5)
    ranks = rng.integers(1, 30, 1001)
    rankings = [list(range(100, 100 + r - 1)) + [0] for r in ranks]
    a = compute_metrics(rankings, [0] * 1001)
    perm = rng.permutation(1001)
    b = compute_metrics([rankings[i] for i in perm], [0] * 1001)
    assert a.values == b.values
    expected = math.fsum(1 / math.log2(r + 1) for r in ranks if r <= 10) / 1001
    assert a["NDCG@10"] == expected


def test_aggregate_reports_mean_and_std():
    r1 = compute_metrics([[1]], [1], Ks=(10,))
    r2 = compute_metrics([[2]], [1], Ks=(10,))
    agg = aggregate_reports([r1, r2])
    assert agg["HR@10"] == 0.5 and agg.std["HR@10"] == 0.5
    assert ("-", "test", "HR", 10, 0.5, 3) in agg.records(seed=3)


def test_baselines():
    ranked = popularity_rankings([5, 9, 1, 7], [[1], []], 2)
    assert [list(r) for r in ranked] == [[3, 0], [1, 3]]
    assert random_hit_rate(100, [0, 50], 10) == pytest.approx((0.1 + 0.2) / 2)
