"""Pseudo-label uncertainty from student/teacher soft-multilabel disagreement.

A feature's soft multilabel is the softmax of its similarities to a bank of
"reference persons" (target cluster centers and/or source class centers).
The uncertainty of a sample is KL(teacher || student) between the two soft
multilabels, and its credibility weight is ``exp(-u)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import kl_div, log_softmax, softmax

MODES = ("R", "R_t", "R_s")
FEATURE_CONSISTENCY = "feat"


@dataclass(frozen=True)
class ReferenceBank:
    """Unit-norm reference rows; target centers first, then source centers."""

    R: np.ndarray
    k_target: int
    k_source: int

    @property
    def k_ref(self) -> int:
        return self.k_target + self.k_source


@dataclass(frozen=True)
class Credibility:
    u: float
    omega: float

    @classmethod
    def from_u(cls, u: float) -> "Credibility":
        if u < 0:
            raise ValueError("uncertainty must be nonnegative")
        return cls(float(u), float(np.exp(-u)))


def _rows(a) -> np.ndarray:
    if a is None:
        return np.zeros((0, 0))
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(0, 0) if a.size == 0 else np.atleast_2d(a)


def build_reference_bank(target_centers, source_centers, mode: str = "R") -> ReferenceBank:
    if mode not in MODES:
        raise ValueError(f"unknown reference mode {mode!r}; expected one of {MODES}")
    rt, rs = _rows(target_centers), _rows(source_centers)
    parts, kt, ks = [], 0, 0
    if mode in ("R", "R_t") and len(rt):
        parts.append(rt)
        kt = len(rt)
    if mode in ("R", "R_s") and len(rs):
        parts.append(rs)
        ks = len(rs)
    if not parts:
        raise ValueError("empty reference bank")
    if len({p.shape[1] for p in parts}) != 1:
        raise ValueError("dimension mismatch between target and source centers")
    R = np.vstack(parts)
    norms = np.linalg.norm(R, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("degenerate reference row")
    return ReferenceBank(R / norms, kt, ks)


def soft_multilabel(bank: ReferenceBank, f, temperature: float = 1.0) -> np.ndarray:
    """``softmax(R f / temperature)``; ``f`` may be one feature or a batch of rows."""
    f = np.asarray(f, dtype=np.float64)
    return softmax(f @ bank.R.T, temperature)


def uncertainty_batch(bank: ReferenceBank, f_student, f_teacher, temperature: float = 1.0):
    """Per-row u = KL(p_teacher || p_student) and its gradient wrt the student feature.

    The teacher side is a constant. The returned gradient ignores the KL
    floor, which only matters for probabilities below 1e-12.
    """
    fs = np.atleast_2d(np.asarray(f_student, dtype=np.float64))
    ft = np.atleast_2d(np.asarray(f_teacher, dtype=np.float64))
    logits_t = ft @ bank.R.T
    logits_s = fs @ bank.R.T
    log_pt = log_softmax(logits_t, temperature)
    log_ps = log_softmax(logits_s, temperature)
    p_teacher = np.exp(log_pt)
    p_student = np.exp(log_ps)
    # log-domain form: exactly zero when the two features coincide
    u = np.maximum(np.sum(p_teacher * (log_pt - log_ps), axis=1), 0.0)
    grad = (p_student - p_teacher) @ bank.R / temperature
    return u, grad


def sample_uncertainty(bank: ReferenceBank, f_student, f_teacher, temperature: float = 1.0) -> Credibility:
    p_teacher = soft_multilabel(bank, f_teacher, temperature)
    p_student = soft_multilabel(bank, f_student, temperature)
    return Credibility.from_u(kl_div(p_teacher, p_student))


def feature_consistency_batch(f_student, f_teacher):
    """u = 1 - <f_s, f_t> per row and its gradient wrt the student feature."""
    fs = np.atleast_2d(np.asarray(f_student, dtype=np.float64))
    ft = np.atleast_2d(np.asarray(f_teacher, dtype=np.float64))
    u = np.clip(1.0 - np.sum(fs * ft, axis=1), 0.0, 2.0)
    return u, -ft


def feature_consistency_uncertainty(f_student, f_teacher) -> Credibility:
    u, _ = feature_consistency_batch(f_student, f_teacher)
    return Credibility.from_u(float(u[0]))


def pair_credibility(u_a, u_b):
    """``exp(-u_a) + exp(-u_b)``, in (0, 2]."""
    u_a = np.asarray(u_a, dtype=np.float64)
    u_b = np.asarray(u_b, dtype=np.float64)
    if np.any(u_a < 0) or np.any(u_b < 0):
        raise ValueError("uncertainty must be nonnegative")
    out = np.exp(-u_a) + np.exp(-u_b)
    return float(out) if out.ndim == 0 else out


def pair_weight(u_a, u_b):
    """Mean credibility of a pair: half of :func:`pair_credibility`, in (0, 1].

    This is the weight the pair losses use, so u = 0 gives weight 1 and the
    weighted losses collapse to their plain forms.
    """
    return 0.5 * pair_credibility(u_a, u_b)
