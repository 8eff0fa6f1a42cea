"""DBSCAN over cosine distance and pseudo-label bookkeeping."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

OUTLIER = -1


@dataclass
class PseudoLabeledSet:
    sample_ids: np.ndarray
    labels: np.ndarray
    n_clusters: int
    centers: np.ndarray | None = None

    @property
    def inlier_mask(self) -> np.ndarray:
        return self.labels != OUTLIER

    @property
    def n_outliers(self) -> int:
        return int(np.sum(self.labels == OUTLIER))

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def cosine_distance_matrix(features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("degenerate vector")
    f = f / norms
    return 1.0 - np.clip(f @ f.T, -1.0, 1.0)


def dbscan(features, eps: float = 0.6, min_pts: int = 4, sample_ids=None) -> PseudoLabeledSet:
    """Classic DBSCAN on cosine distance.

    Points are visited in ascending sample id, so cluster ids follow the
    lowest core point of each cluster and a border point reachable from
    several clusters joins the one discovered first. Neighborhoods are
    ``d <= eps`` and include the point itself.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("dbscan needs at least one feature")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = len(f)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    if len(ids) != n or len(np.unique(ids)) != n:
        raise ValueError("sample_ids must be unique and match features")

    adjacency = cosine_distance_matrix(f) <= eps
    is_core = adjacency.sum(axis=1) >= min_pts
    order = np.argsort(ids, kind="stable")
    # neighbor lists in ascending sample id so expansion order is reproducible
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    labels = np.full(n, OUTLIER, dtype=np.int64)
    next_id = 0
    for i in order:
        if labels[i] != OUTLIER or not is_core[i]:
            continue
        labels[i] = next_id
        queue = deque([i])
        while queue:
            c = queue.popleft()
            nbrs = np.flatnonzero(adjacency[c])
            for j in nbrs[np.argsort(rank[nbrs], kind="stable")]:
                if labels[j] != OUTLIER:
                    continue
                labels[j] = next_id
                if is_core[j]:
                    queue.append(j)
        next_id += 1
    return PseudoLabeledSet(sample_ids=ids.copy(), labels=labels, n_clusters=next_id)


def cluster_centers(features, labels, n_clusters: int | None = None) -> np.ndarray:
    """Row k is the L2-normalized mean of the features labeled k."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if n_clusters is None:
        n_clusters = int(labels.max()) + 1 if np.any(labels != OUTLIER) else 0
    centers = np.zeros((n_clusters, f.shape[1]))
    for k in range(n_clusters):
        members = labels == k
        if not np.any(members):
            raise ValueError(f"cluster {k} has no members")
        mean = f[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm <= 1e-12:
            raise ValueError("degenerate center")
        centers[k] = mean / norm
    return centers
