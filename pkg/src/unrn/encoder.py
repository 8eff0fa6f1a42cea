"""Two-layer tanh embedding network with analytic backprop and ADAM.

Stand-in for a CNN backbone: every training signal in the package is a
gradient with respect to L2-normalized output features, which
:func:`backward_batch` pushes through the normalization, the affine maps
and the tanh.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_NORM = 1e-8

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class ModelParams:
    """Weights of ``x -> W2 tanh(W1 x + b1) + b2``.

    ``w1`` is (H, D_in), ``w2`` is (D, H).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unravel(self, flat: np.ndarray) -> "ModelParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[i : i + a.size], dtype=np.float64).reshape(a.shape).copy())
            i += a.size
        return ModelParams(*out)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, c: float) -> "ModelParams":
        return ModelParams(*(c * a for a in self.arrays()))


def init_params(seed: int, dims: tuple[int, int, int]) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    Each weight matrix is drawn from U(-r, r) with
    r = sqrt(6 / (fan_in + fan_out)), using numpy's PCG64 seeded with ``seed``.
    """
    d_in, hidden, d_out = (int(d) for d in dims)
    if min(d_in, hidden, d_out) < 1:
        raise ValueError(f"all dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    r1 = np.sqrt(6.0 / (d_in + hidden))
    r2 = np.sqrt(6.0 / (hidden + d_out))
    w1 = rng.uniform(-r1, r1, size=(hidden, d_in))
    w2 = rng.uniform(-r2, r2, size=(d_out, hidden))
    return ModelParams(w1, np.zeros(hidden), w2, np.zeros(d_out))


@dataclass
class ForwardCache:
    x: np.ndarray
    hidden: np.ndarray
    norm: np.ndarray
    features: np.ndarray


def forward_batch(params: ModelParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.w1.shape[1]:
        raise ValueError(f"input dim {x.shape[1]} != {params.w1.shape[1]}")
    h = np.tanh(x @ params.w1.T + params.b1)
    y = h @ params.w2.T + params.b2
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(norm <= DEGENERATE_NORM):
        raise ValueError("degenerate embedding")
    f = y / norm
    return f, ForwardCache(x, h, norm, f)


def encode(params: ModelParams, x) -> np.ndarray:
    return forward_batch(params, x)[0]


def forward(params: ModelParams, x) -> np.ndarray:
    """Unit-norm feature of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single vector; use forward_batch")
    return forward_batch(params, x[None, :])[0][0]


def backward_batch(params: ModelParams, cache: ForwardCache, grad_features) -> ModelParams:
    """Gradient of ``sum_i f_i . g_i`` with respect to every parameter."""
    g = np.asarray(grad_features, dtype=np.float64).reshape(cache.features.shape)
    f = cache.features
    # Jacobian of y / |y| is (I - f f^T) / |y|
    dy = (g - f * np.sum(f * g, axis=1, keepdims=True)) / cache.norm
    dw2 = dy.T @ cache.hidden
    db2 = dy.sum(axis=0)
    dz = (dy @ params.w2) * (1.0 - cache.hidden**2)
    dw1 = dz.T @ cache.x
    db1 = dz.sum(axis=0)
    return ModelParams(dw1, db1, dw2, db2)


def backward(params: ModelParams, x, grad_feature) -> ModelParams:
    x = np.asarray(x, dtype=np.float64)
    grad_feature = np.asarray(grad_feature, dtype=np.float64)
    if grad_feature.shape != (params.w2.shape[0],):
        raise ValueError("grad_feature must have length D")
    _, cache = forward_batch(params, x[None, :])
    return backward_batch(params, cache, grad_feature[None, :])


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def _leaves(p) -> list[np.ndarray]:
    if isinstance(p, ModelParams):
        return p.arrays()
    if isinstance(p, np.ndarray):
        return [p]
    return list(p)


def _rebuild(template, leaves):
    if isinstance(template, ModelParams):
        return ModelParams(*leaves)
    if isinstance(template, np.ndarray):
        return leaves[0]
    return leaves


def adam_step(params, grads, state: AdamState | None = None, lr: float = 0.00035,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected ADAM update.

    ``params`` may be a :class:`ModelParams`, a single array, or a list of
    arrays. Returns ``(new_params, new_state)``; inputs are not mutated.
    """
    p_leaves = _leaves(params)
    g_leaves = _leaves(grads)
    if len(p_leaves) != len(g_leaves) or any(a.shape != b.shape for a, b in zip(p_leaves, g_leaves)):
        raise ValueError("shape mismatch between params and grads")
    if state is None or state.t == 0 and not state.m:
        state = AdamState([np.zeros_like(a) for a in p_leaves], [np.zeros_like(a) for a in p_leaves], 0)
    if any(a.shape != m.shape for a, m in zip(p_leaves, state.m)):
        raise ValueError("shape mismatch between params and optimizer state")
    b1, b2 = betas
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_leaves, g_leaves, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return _rebuild(params, new_p), AdamState(new_m, new_v, t)
