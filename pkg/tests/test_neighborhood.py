import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lafavlad.errors import ValidationError
from lafavlad.neighborhood import build_hierarchy, knn, random_subsample


def brute_knn(query, base, k):
    """Exhaustive search with the (distance, index) tie rule, one row at a time."""
    out = []
    for q in query:
        d = [(float(np.sum((b - q) ** 2)), j) for j, b in enumerate(base)]
        d.sort()
        out.append([j for _, j in d[:k]])
    return np.array(out)


def test_self_is_nearest():
    pts = np.random.default_rng(0).uniform(size=(50, 3))
    np.testing.assert_array_equal(knn(pts, pts, 1)[:, 0], np.arange(50))


@pytest.mark.parametrize("n,k", [(1000, 16), (300, 32)])
def test_matches_exhaustive_search(n, k):
    pts = np.random.default_rng(n).uniform(size=(n, 3))
    np.testing.assert_array_equal(knn(pts, pts, k), brute_knn(pts, pts, k))


def test_tree_path_with_ties_matches_exhaustive():
    # integer grid: many exact distance ties, and large enough for the tree path
    g = np.stack(np.meshgrid(np.arange(9), np.arange(9), np.arange(9), indexing="ij"), -1).reshape(-1, 3)
    pts = g.astype(float)
    got = knn(pts, pts, 7)
    expect = brute_knn(pts[:60], pts, 7)
    np.testing.assert_array_equal(got[:60], expect)


def test_k_exceeds_base():
    with pytest.raises(ValidationError):
        knn(np.zeros((2, 3)), np.zeros((3, 3)), 4)


def test_non_finite_rejected():
    with pytest.raises(ValidationError):
        knn(np.array([[np.nan, 0, 0]]), np.zeros((3, 3)), 1)


@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_knn_property_sorted_distances(n, k, seed):
    k = min(k, n)
    pts = np.random.default_rng(seed).integers(0, 4, size=(n, 3)).astype(float)
    idx = knn(pts, pts, k)
    d = np.sum((pts[idx] - pts[:, None]) ** 2, axis=-1)
    assert np.all(np.diff(d, axis=1) >= 0)
    np.testing.assert_array_equal(idx, brute_knn(pts, pts, k))


def test_subsample_examples():
    assert len(random_subsample(4, 4, 0)) == 1
    assert len(random_subsample(40960, 4, 0)) == 10240
    kept = random_subsample(1001, 4, 3)
    assert len(kept) == math.ceil(1001 / 4) and len(set(kept)) == len(kept)
    np.testing.assert_array_equal(kept, random_subsample(1001, 4, 3))


def test_subsample_is_uniform_monte_carlo():
    n, trials = 64, 10000
    counts = np.zeros(n)
    for s in range(trials):
        counts[random_subsample(n, 4, s)] += 1
    p = 16 / 64
    sigma = math.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) < 3 * sigma)


def test_hierarchy_default_sizes():
    pts = np.random.default_rng(0).uniform(size=(40960, 3))
    h = build_hierarchy(pts, 4, 16, 4, 0)
    assert h.sizes == [40960, 10240, 2560, 640, 160]


def test_hierarchy_identity_and_too_small():
    pts = np.random.default_rng(0).uniform(size=(20, 3))
    h = build_hierarchy(pts, 0, 4, 4, 0)
    assert h.sizes == [20] and h.levels == 0
    np.testing.assert_array_equal(h.source[0], np.arange(20))
    with pytest.raises(ValidationError):
        build_hierarchy(pts, 3, 4, 4, 0)


def test_hierarchy_structure_against_brute_force():
    pts = np.random.default_rng(5).uniform(size=(600, 3))
    h = build_hierarchy(pts, 3, 8, 4, 11)
    for lvl in range(h.levels):
        fine, coarse = h.positions[lvl], h.positions[lvl + 1]
        assert len(coarse) == math.ceil(len(fine) / 4)
        assert len(set(h.kept[lvl])) == len(h.kept[lvl])
        assert set(h.source[lvl + 1]) <= set(h.source[lvl])
        np.testing.assert_array_equal(coarse, fine[h.kept[lvl]])
        np.testing.assert_array_equal(h.upsample[lvl], brute_knn(fine, coarse, 1)[:, 0])
    for lvl in range(h.levels + 1):
        np.testing.assert_array_equal(h.neighbors[lvl], brute_knn(h.positions[lvl], h.positions[lvl], 8))
