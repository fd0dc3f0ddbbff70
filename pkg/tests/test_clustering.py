import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import linkage

from fedsikd import clustering as C
from helpers import avg_linkage_oracle, best_2partition, blobs, ch_oracle, db_oracle, silhouette_oracle

SIX = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [5.0, 5.0], [6.0, 5.0], [5.5, 7.0]])
SIX_LABELS = np.array([0, 0, 0, 1, 1, 1])


def test_silhouette_oracle():
    assert C.silhouette(SIX, SIX_LABELS) == pytest.approx(silhouette_oracle(SIX, SIX_LABELS), rel=1e-9)
    lab = np.array([0, 1, 0, 2, 2, 1])
    assert C.silhouette(SIX, lab) == pytest.approx(silhouette_oracle(SIX, lab), rel=1e-9)


def test_ch_oracle():
    for lab in (SIX_LABELS, np.array([0, 1, 0, 2, 2, 1])):
        assert C.calinski_harabasz(SIX, lab) == pytest.approx(ch_oracle(SIX, lab), rel=1e-9)


def test_db_oracle():
    for lab in (SIX_LABELS, np.array([0, 1, 0, 2, 2, 1])):
        assert C.davies_bouldin(SIX, lab) == pytest.approx(db_oracle(SIX, lab), rel=1e-9)


def test_indices_match_sklearn():
    from sklearn import metrics as skm

    x, y = blobs(10, [(0, 0), (3, 1), (1, 4)], spread=0.8, seed=3)
    assert C.silhouette(x, y) == pytest.approx(skm.silhouette_score(x, y), rel=1e-9)
    assert C.calinski_harabasz(x, y) == pytest.approx(skm.calinski_harabasz_score(x, y), rel=1e-9)
    assert C.davies_bouldin(x, y) == pytest.approx(skm.davies_bouldin_score(x, y), rel=1e-9)


def test_index_limits_and_sentinels():
    x, y = blobs(15, [(0, 0), (100, 100)], spread=0.1)
    assert C.silhouette(x, y) > 0.9
    assert C.davies_bouldin(x, y) < 0.01
    dup = np.array([[0, 0], [0, 0], [5, 5], [5, 5]], float)
    assert C.calinski_harabasz(dup, [0, 0, 1, 1]) == math.inf
    assert C.davies_bouldin(np.array([[0, 0], [1, 1], [0, 0], [1, 1]], float), [0, 0, 1, 1]) == math.inf
    assert C.silhouette(SIX, np.arange(6)) == 0.0
    with pytest.raises(ValueError):
        C.silhouette(SIX, np.zeros(6))
    with pytest.raises(ValueError):
        C.calinski_harabasz(SIX, np.arange(6))


def test_ch_prefers_true_labels():
    x, y = blobs(20, [(0, 0), (6, 0), (0, 6)], spread=0.5, seed=1)
    rand = np.random.default_rng(0).integers(0, 3, len(y))
    assert C.calinski_harabasz(x, y) > C.calinski_harabasz(x, rand)


def _same_partition(a, b):
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(len(a)) for j in range(len(a)))


def test_kmeans_four_points():
    x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], float)
    fit = C.kmeans(x, 2, rng_seed=0)
    assert _same_partition(fit.labels, [0, 0, 1, 1])
    assert fit.inertia == pytest.approx(best_2partition(x)[0], rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 9))
    x = rng.normal(size=(n, 2)) + np.repeat([[0, 0], [4, 4]], [n // 2, n - n // 2], axis=0)
    j, lab = best_2partition(x)
    fit = C.kmeans(x, 2, restarts=10, rng_seed=seed)
    assert fit.inertia == pytest.approx(j, rel=1e-9)
    assert _same_partition(fit.labels, lab)


def test_kmeans_k1_and_identical():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 3))
    fit = C.kmeans(x, 1)
    assert np.allclose(fit.centroids[0], x.mean(0))
    assert fit.inertia == pytest.approx(x.var(0).sum() * len(x), rel=1e-9)
    same = np.ones((6, 2))
    for k in range(1, 7):
        fit = C.kmeans(same, k)
        assert fit.inertia == 0
        assert set(fit.labels) == set(range(k))
    with pytest.raises(ValueError):
        C.kmeans(x, 10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_kmeans_invariants(seed, k):
    x = np.random.default_rng(seed).normal(size=(12, 3))
    fit = C.kmeans(x, k, restarts=2, rng_seed=seed)
    h = fit.history
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))
    assert sorted(set(fit.labels)) == list(range(k))
    assert fit.inertia == pytest.approx(C.inertia(x, fit.labels, fit.centroids), rel=1e-12)


def test_more_restarts_never_worse():
    x = np.random.default_rng(7).normal(size=(30, 2))
    js = [C.kmeans(x, 5, restarts=r, rng_seed=3).inertia for r in (1, 3, 10)]
    assert js[0] >= js[1] >= js[2]


def test_select_k_blobs():
    x, _ = blobs(10, [(0, 0), (8, 0), (4, 7)], spread=0.4, seed=2)
    k, table = C.select_k(x, 2, 6, rng_seed=0)
    assert k == 3
    assert [s.k for s in table] == [2, 3, 4, 5, 6]


def test_select_k_scale_invariant():
    for seed in range(3):
        x, _ = blobs(8, [(0, 0, 0), (5, 0, 1), (0, 6, 2), (6, 6, 6)], spread=0.6, seed=seed)
        assert C.select_k(x, 2, 6, rng_seed=seed)[0] == C.select_k(x * 37.5, 2, 6, rng_seed=seed)[0]


def test_select_k_single_candidate_and_errors():
    x = np.array([[0, 0], [1, 0], [5, 5]], float)
    assert C.select_k(x, 2, 2)[0] == 2
    with pytest.raises(ValueError):
        C.select_k(x, 3, 2)
    with pytest.raises(ValueError):
        C.select_k(x, 2, 3)


def test_select_k_tie_goes_small(monkeypatch):
    # Indices rigged so K=2 and K=4 tie on rank sum: 2 wins silhouette, 4 wins CH, both tie on DB.
    fake = {2: (0.9, 1.0, 0.5), 3: (0.1, 0.1, 0.9), 4: (0.5, 5.0, 0.5)}

    def fake_fit(x, k, *a, **kw):
        return C.ClusterAssignment(np.full(len(x), k), np.zeros((k, 1)), 0.0)

    monkeypatch.setattr(C, "kmeans", fake_fit)
    monkeypatch.setattr(C, "silhouette", lambda x, l: fake[l[0]][0])
    monkeypatch.setattr(C, "calinski_harabasz", lambda x, l: fake[l[0]][1])
    monkeypatch.setattr(C, "davies_bouldin", lambda x, l: fake[l[0]][2])
    k, table = C.select_k(np.zeros((6, 1)), 2, 4)
    sums = {s.k: s.rank_sum for s in table}
    assert sums[2] == sums[4] < sums[3]
    assert k == 2


@pytest.mark.parametrize("seed", range(4))
def test_linkage_matches_bruteforce(seed):
    x = np.random.default_rng(seed).normal(size=(5, 2))
    got = C.linkage_merges(x)
    want = avg_linkage_oracle(x.tolist())
    for (a, b, d, s), (a2, b2, d2, s2) in zip(got, want):
        assert (a, b, s) == (a2, b2, s2)
        assert d == pytest.approx(d2, rel=1e-9)
    ref = linkage(x, method="average")
    assert np.allclose([m[2] for m in got], ref[:, 2], rtol=1e-9)


def test_agglomerative_cuts():
    x = np.random.default_rng(0).normal(size=(7, 3))
    d = np.sqrt(C.sq_dists(x, x))
    min_d = d[np.triu_indices(7, 1)].min()
    assert list(C.agglomerative_cluster(x, distance_threshold=min_d * 0.5)) == list(range(7))
    top = C.linkage_merges(x)[-1][2]
    assert set(C.agglomerative_cluster(x, distance_threshold=top * 1.01)) == {0}
    assert list(C.agglomerative_cluster(x, fixed_k=7)) == list(range(7))
    assert len(set(C.agglomerative_cluster(x, fixed_k=3))) == 3
    with pytest.raises(ValueError):
        C.agglomerative_cluster(x, distance_threshold=0.0)
    with pytest.raises(ValueError):
        C.agglomerative_cluster(x)


def test_agglomerative_two_groups():
    x, y = blobs(5, [(0, 0), (20, 20)], spread=0.5)
    lab = C.agglomerative_cluster(x, fixed_k=2)
    assert _same_partition(lab, y)


def test_zscore_constant_column():
    z = C.zscore(np.array([[1.0, 5.0], [3.0, 5.0]]))
    assert np.allclose(z[:, 0], [-1, 1]) and np.all(z[:, 1] == 0)
