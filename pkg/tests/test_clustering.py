import numpy as np
import pytest

from conftest import unit_rows
from dbscan_oracle import brute_force_dbscan
from unrn.clustering import OUTLIER, cluster_centers, dbscan


def canonical(labels):
    """Relabel clusters by order of first appearance; outliers stay -1."""
    mapping, out = {}, []
    for y in labels:
        if y == OUTLIER:
            out.append(OUTLIER)
        else:
            out.append(mapping.setdefault(y, len(mapping)))
    return out


def clustered_instance(rng, n, d=3):
    k = rng.integers(1, 5)
    centers = unit_rows(rng, k, d)
    x = centers[rng.integers(0, k, n)] + rng.uniform(0.05, 0.6) * rng.standard_normal((n, d))
    return x


def test_identical_points_one_cluster():
    f = np.tile([0.6, 0.8], (6, 1))
    res = dbscan(f, eps=0.1, min_pts=4)
    assert res.n_clusters == 1 and res.n_outliers == 0


def test_distant_points_all_outliers():
    f = np.eye(3)
    res = dbscan(f, eps=0.5, min_pts=4)
    assert res.n_clusters == 0
    assert np.all(res.labels == OUTLIER)


def test_empty_input():
    with pytest.raises(ValueError):
        dbscan(np.zeros((0, 3)), 0.5, 2)


def test_self_counts_as_neighbor():
    f = np.array([[1.0, 0.0], [1.0, 0.01], [0.0, 1.0]])
    assert dbscan(f, eps=0.01, min_pts=2).labels.tolist() == [0, 0, OUTLIER]
    assert dbscan(f, eps=0.01, min_pts=1).labels.tolist() == [0, 0, 1]


@pytest.mark.parametrize("eps", [0.2, 0.6, 1.0])
@pytest.mark.parametrize("min_pts", [2, 4])
def test_matches_brute_force(eps, min_pts):
    rng = np.random.default_rng(int(eps * 10) * 7 + min_pts)
    for _ in range(20):
        x = clustered_instance(rng, int(rng.integers(1, 51)))
        ours = dbscan(x, eps, min_pts).labels.tolist()
        assert canonical(ours) == canonical(brute_force_dbscan(x, eps, min_pts))


def test_permutation_invariance(rng):
    for _ in range(20):
        x = clustered_instance(rng, 40)
        ids = np.arange(40)
        base = dbscan(x, 0.3, 3, ids)
        perm = rng.permutation(40)
        shuffled = dbscan(x[perm], 0.3, 3, ids[perm])
        back = np.empty(40, dtype=np.int64)
        back[perm] = shuffled.labels
        # ids travel with their points, so even cluster ids coincide
        np.testing.assert_array_equal(back, base.labels)


def test_outlier_law(rng):
    x = clustered_instance(rng, 50)
    res = dbscan(x, 0.3, 4)
    f = x / np.linalg.norm(x, axis=1, keepdims=True)
    near = (1.0 - f @ f.T) <= 0.3
    core = near.sum(1) >= 4
    for i in np.flatnonzero(res.labels == OUTLIER):
        assert near[i].sum() < 4
        assert not np.any(near[i] & core)


def test_border_point_goes_to_first_cluster():
    # two groups of four on the unit circle and a non-core point 19 degrees from each
    ang = np.deg2rad([0, 0.5, 1, 2, 21, 40, 41, 41.5, 42])
    f = np.c_[np.cos(ang), np.sin(ang)]
    eps = 1 - np.cos(np.deg2rad(19.5))
    res = dbscan(f, eps, 4)
    assert res.labels.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]
    # once the right-hand group owns the lowest ids it is discovered first and takes the border point
    res2 = dbscan(f, eps, 4, sample_ids=[8, 7, 6, 5, 4, 0, 1, 2, 3])
    assert res2.labels.tolist() == [1, 1, 1, 1, 0, 0, 0, 0, 0]
    assert canonical(brute_force_dbscan(f, eps, 4, [8, 7, 6, 5, 4, 0, 1, 2, 3])) == canonical(res2.labels)


class TestCenters:
    def test_identical_members(self):
        v = np.array([0.6, 0.8])
        np.testing.assert_allclose(cluster_centers(np.tile(v, (3, 1)), [0, 0, 0]), [v], atol=1e-15)

    def test_two_axes(self):
        c = cluster_centers([[1.0, 0.0], [0.0, 1.0]], [0, 0])
        np.testing.assert_allclose(c, [[1 / np.sqrt(2), 1 / np.sqrt(2)]], atol=1e-15)

    def test_outliers_excluded_and_brute_force(self, rng):
        f = unit_rows(rng, 30, 4)
        labels = rng.integers(-1, 3, 30)
        labels[:3] = [0, 1, 2]
        got = cluster_centers(f, labels, 3)
        for k in range(3):
            members = [f[i] for i in range(30) if labels[i] == k]
            mean = sum(members) / len(members)
            np.testing.assert_allclose(got[k], mean / np.sqrt(sum(mean**2)), atol=1e-12)

    def test_degenerate_center(self):
        with pytest.raises(ValueError, match="degenerate center"):
            cluster_centers([[1.0, 0.0], [-1.0, 0.0]], [0, 0])
