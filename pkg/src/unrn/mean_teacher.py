"""Temporal EMA teacher."""

from __future__ import annotations

from .encoder import ModelParams


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float = 0.999) -> ModelParams:
    """Return ``alpha * teacher + (1 - alpha) * student``, elementwise.

    Neither argument is modified; the caller rebinds its teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    t_arrays, s_arrays = teacher.arrays(), student.arrays()
    if any(a.shape != b.shape for a, b in zip(t_arrays, s_arrays)):
        raise ValueError("teacher/student shape mismatch")
    if alpha == 1.0:
        return teacher.copy()
    if alpha == 0.0:
        return student.copy()
    return ModelParams(*(alpha * t + (1.0 - alpha) * s for t, s in zip(t_arrays, s_arrays)))
