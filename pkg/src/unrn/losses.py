"""Training objectives with analytic gradients.

Every loss takes features that are assumed to be unit norm and uses plain
dot products as similarities, so the returned ``feature_grads`` are the
gradients of the value with respect to the raw feature arrays. Projecting
them onto the sphere is the encoder's job.

Credibility weights (``omegas`` / per-sample ``u``) enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory_bank import MemoryBank
from .numerics import log_softmax, logsumexp, sigmoid, softmax, softplus
from .uncertainty import pair_weight


@dataclass
class LossOutput:
    value: float
    feature_grads: np.ndarray
    aux_grads: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"non-finite loss value {self.value}")


@dataclass(frozen=True)
class LossWeights:
    lambda_tri: float = 1.0
    lambda_ct: float = 0.05
    lambda_reg: float = 1.0

    def __post_init__(self):
        if min(self.lambda_tri, self.lambda_ct, self.lambda_reg) < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label index out of range for {n_classes} classes")
    return labels.astype(np.int64)


def id_loss(features, labels, class_weights, omegas=None, scale: float = 16.0) -> LossOutput:
    """Credibility-weighted cross-entropy of a cosine classifier.

    Logits are ``scale * <f_i, w_c / |w_c|>``; the value is
    ``-(1/n) sum_i omega_i log p(y_i | f_i)``. ``omegas=None`` is the plain
    ID loss. ``aux_grads`` holds the gradient wrt the raw class weight rows.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    V = np.atleast_2d(np.asarray(class_weights, dtype=np.float64))
    n = len(f)
    labels = _check_labels(labels, len(V))
    w = np.ones(n) if omegas is None else np.asarray(omegas, dtype=np.float64)
    if n == 0:
        return LossOutput(0.0, np.zeros_like(f), np.zeros_like(V))
    if np.any(w <= 0) or np.any(w > 1):
        raise ValueError("omegas must lie in (0, 1]")
    vnorm = np.linalg.norm(V, axis=1, keepdims=True)
    W = V / vnorm
    logits = scale * (f @ W.T)
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = float(-np.sum(w * logp[rows, labels]) / n)

    dz = softmax(logits)
    dz[rows, labels] -= 1.0
    dz *= (w / n)[:, None]
    grad_f = scale * dz @ W
    grad_W = scale * dz.T @ f
    grad_V = (grad_W - W * np.sum(W * grad_W, axis=1, keepdims=True)) / vnorm
    return LossOutput(value, grad_f, grad_V)


def source_id_loss(features, labels, class_centers, scale: float = 16.0) -> LossOutput:
    return id_loss(features, labels, class_centers, None, scale)


def batch_hard_triplets(features, labels, sample_ids=None) -> np.ndarray:
    """(anchor, hardest positive, hardest negative) index rows.

    Hardest positive is the least similar same-label sample, hardest
    negative the most similar other-label sample; ties go to the lower
    sample id. Anchors lacking a positive or a negative are skipped.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    n = len(f)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    sims = f @ f.T
    out = []
    for a in range(n):
        same = labels == labels[a]
        same[a] = False
        diff = labels != labels[a]
        if not same.any() or not diff.any():
            continue
        pos = np.flatnonzero(same)
        neg = np.flatnonzero(diff)
        p = pos[np.lexsort((ids[pos], sims[a, pos]))[0]]
        q = neg[np.lexsort((ids[neg], -sims[a, neg]))[0]]
        out.append((a, p, q))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def utri_loss(features, triplets, omega_ap=None, omega_an=None) -> LossOutput:
    """Credibility-weighted softmax triplet loss averaged over triplets.

    Per triplet: ``-log(w_ap e^{s_ap} / (w_ap e^{s_ap} + w_an e^{s_an}))``.
    Omitted weights mean the plain softmax-triplet loss.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    tr = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    grads = np.zeros_like(f)
    m = len(tr)
    if m == 0:
        return LossOutput(0.0, grads)
    w_ap = np.ones(m) if omega_ap is None else np.asarray(omega_ap, dtype=np.float64)
    w_an = np.ones(m) if omega_an is None else np.asarray(omega_an, dtype=np.float64)
    if np.any(w_ap <= 0) or np.any(w_an <= 0):
        raise ValueError("pair weights must be positive")
    a, p, q = tr[:, 0], tr[:, 1], tr[:, 2]
    s_ap = np.sum(f[a] * f[p], axis=1)
    s_an = np.sum(f[a] * f[q], axis=1)
    t = s_an - s_ap + (np.log(w_an) - np.log(w_ap))
    value = float(np.mean(softplus(t)))

    r = (sigmoid(t) / m)[:, None]
    np.add.at(grads, a, r * (f[q] - f[p]))
    np.add.at(grads, p, -r * f[a])
    np.add.at(grads, q, r * f[a])
    return LossOutput(value, grads)


def _self_paced(s, positive: bool, margin: float, gamma: float):
    """Circle-style re-weighted similarity and its derivative wrt ``s``."""
    if positive:
        alpha = np.maximum(1.0 + margin - s, 0.0)
        delta = 1.0 - margin
        dalpha = -1.0 * (alpha > 0)
    else:
        alpha = np.maximum(margin + s, 0.0)
        delta = margin
        dalpha = (alpha > 0) * 1.0
    value = gamma * alpha * (s - delta)
    deriv = gamma * (alpha + dalpha * (s - delta))
    return value, deriv


def uct_loss(anchor_features, anchor_labels, anchor_u, bank: MemoryBank,
             margin: float = 0.25, gamma: float = 32.0, self_paced: bool = True,
             weighted: bool = True) -> LossOutput:
    """Credibility-weighted contrastive loss against a memory bank.

    For anchor k with bank positives i and negatives j (queued entries of
    other labels plus source centers):

        log(1 + sum_j w_kj exp(s_kj) * sum_i w_ki exp(-s_ki))

    where the similarities are circle-style re-weighted when ``self_paced``
    (otherwise just scaled by ``gamma``) and ``w`` is the mean credibility
    of the pair. ``weighted=False`` fixes every pair weight to 1. Bank
    entries are constants; only anchors receive gradient.
    """
    f = np.atleast_2d(np.asarray(anchor_features, dtype=np.float64))
    labels = np.asarray(anchor_labels)
    u = np.asarray(anchor_u, dtype=np.float64)
    n = len(f)
    grads = np.zeros_like(f)
    if n == 0:
        return LossOutput(0.0, grads)
    B, bl, bu = bank.snapshot()
    S = bank.source_centers
    if len(B) + len(S) == 0:
        return LossOutput(0.0, grads)
    if len(B) == 0:
        B = np.zeros((0, f.shape[1]))

    total = 0.0
    for k in range(n):
        pos = bl == labels[k]
        neg_feats = np.vstack([B[~pos], S]) if len(S) else B[~pos]
        if not pos.any() or len(neg_feats) == 0:
            continue
        pos_feats = B[pos]
        if weighted:
            w_pos = pair_weight(u[k], bu[pos])
            w_neg = pair_weight(u[k], np.concatenate([bu[~pos], np.zeros(len(S))]))
        else:
            w_pos = np.ones(len(pos_feats))
            w_neg = np.ones(len(neg_feats))
        s_pos = pos_feats @ f[k]
        s_neg = neg_feats @ f[k]
        if self_paced:
            h_pos, d_pos = _self_paced(s_pos, True, margin, gamma)
            h_neg, d_neg = _self_paced(s_neg, False, margin, gamma)
        else:
            h_pos, d_pos = gamma * s_pos, np.full(len(s_pos), gamma)
            h_neg, d_neg = gamma * s_neg, np.full(len(s_neg), gamma)
        x_neg = np.log(w_neg) + h_neg
        x_pos = np.log(w_pos) - h_pos
        A = logsumexp(x_neg)
        Bv = logsumexp(x_pos)
        total += float(softplus(A + Bv))
        r = float(sigmoid(A + Bv))
        a_neg = np.exp(x_neg - A)
        b_pos = np.exp(x_pos - Bv)
        grads[k] = (r * a_neg * d_neg) @ neg_feats - (r * b_pos * d_pos) @ pos_feats
    grads /= n
    return LossOutput(total / n, grads)


def reg_loss(uncertainties, uncertainty_grads=None) -> LossOutput:
    """Mean uncertainty; ``uncertainty_grads`` rows are du_i/df_i."""
    u = np.asarray(uncertainties, dtype=np.float64)
    if u.size == 0:
        raise ValueError("reg_loss needs at least one uncertainty")
    if np.any(u < 0):
        raise ValueError("uncertainties must be nonnegative")
    n = len(u)
    if uncertainty_grads is None:
        grads = np.zeros((n, 0))
    else:
        grads = np.asarray(uncertainty_grads, dtype=np.float64) / n
    return LossOutput(float(u.mean()), grads)


def total_target_loss(components: dict[str, LossOutput], weights: LossWeights = LossWeights()) -> LossOutput:
    """``id + lambda_tri * tri + lambda_ct * ct + lambda_reg * reg``.

    Missing components count as zero. Feature gradients must share a shape.
    """
    scale = {"id": 1.0, "tri": weights.lambda_tri, "ct": weights.lambda_ct, "reg": weights.lambda_reg}
    unknown = set(components) - set(scale)
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    value = 0.0
    grads = None
    aux = None
    for name in ("id", "tri", "ct", "reg"):
        comp = components.get(name)
        if comp is None:
            continue
        c = scale[name]
        value += c * comp.value
        if comp.feature_grads.size:
            g = c * comp.feature_grads
            grads = g if grads is None else grads + g
        if comp.aux_grads is not None:
            a = c * comp.aux_grads
            aux = a if aux is None else aux + a
    if grads is None:
        grads = np.zeros((0, 0))
    return LossOutput(value, grads, aux)
