"""Retrieval metrics: average precision, mAP and CMC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def average_precision(ranked_relevance) -> float:
    """AP of one ranked list; 0 when nothing is relevant."""
    rel = np.asarray(ranked_relevance, dtype=np.float64)
    n_rel = rel.sum()
    if n_rel == 0:
        return 0.0
    precision_at_k = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float(np.sum(precision_at_k * rel) / n_rel)


def evaluate_retrieval(query_features, query_ids, gallery_features, gallery_ids,
                       ranks=(1, 5, 10)) -> tuple[float, dict[int, float]]:
    """mAP and CMC@k with cosine similarity.

    Gallery items are ranked by descending similarity, ties to the lower
    gallery index. Queries without a true match score AP 0 and never hit.
    """
    q = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery_features, dtype=np.float64))
    qid = np.asarray(query_ids)
    gid = np.asarray(gallery_ids)
    if len(g) == 0 or g.size == 0:
        raise ValueError("empty gallery")
    if len(q) == 0:
        raise ValueError("empty query set")
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    sims = q @ g.T
    aps = []
    first_hit = []
    for i in range(len(q)):
        order = np.lexsort((np.arange(len(g)), -sims[i]))
        rel = gid[order] == qid[i]
        aps.append(average_precision(rel))
        hits = np.flatnonzero(rel)
        first_hit.append(hits[0] if len(hits) else np.inf)
    first_hit = np.asarray(first_hit)
    cmc = {int(k): float(np.mean(first_hit < k)) for k in ranks}
    return float(np.mean(aps)), cmc


def auroc(scores, positives) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    sp, sn = s[pos], s[~pos]
    if len(sp) == 0 or len(sn) == 0:
        return float("nan")
    ranks = rankdata(np.concatenate([sp, sn]))
    return float((ranks[: len(sp)].sum() - len(sp) * (len(sp) + 1) / 2) / (len(sp) * len(sn)))
