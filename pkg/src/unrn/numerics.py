"""Small float64 primitives shared by the rest of the package."""

from __future__ import annotations

import numpy as np

KL_FLOOR = 1e-12
NORM_EPS = 1e-12


def _as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction.

    Works on a vector or row-wise on a 2-D array.
    """
    s = _as_vector(scores)
    if s.size == 0:
        raise ValueError("empty score vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = s / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores, temperature: float = 1.0) -> np.ndarray:
    s = _as_vector(scores) / temperature
    m = s.max(axis=-1, keepdims=True)
    z = s - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_div(p, q) -> float | np.ndarray:
    """KL(p || q) with 0 log 0 = 0 and q floored at ``KL_FLOOR``.

    For 2-D inputs the divergence is taken row-wise.
    """
    p = _as_vector(p)
    q = _as_vector(q)
    if p.shape != q.shape:
        raise ValueError("dimension mismatch")
    qf = np.maximum(q, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(qf)), 0.0)
    # rounding can leave tiny negatives when p == q
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def l2_normalize(x, axis: int = -1) -> np.ndarray:
    x = _as_vector(x)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n <= NORM_EPS):
        raise ValueError("degenerate vector")
    return x / n


def cosine_sim(a, b) -> float:
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ValueError("degenerate vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def logsumexp(x) -> float:
    x = _as_vector(x)
    if x.size == 0:
        return -np.inf
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def sigmoid(x):
    x = _as_vector(x)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(x):
    x = _as_vector(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
