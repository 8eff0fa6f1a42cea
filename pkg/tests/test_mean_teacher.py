import numpy as np
import pytest

from unrn.encoder import ModelParams, init_params
from unrn.mean_teacher import ema_update


def test_alpha_one_and_zero():
    t, s = init_params(0, (3, 4, 2)), init_params(1, (3, 4, 2))
    np.testing.assert_array_equal(ema_update(t, s, 1.0).ravel(), t.ravel())
    np.testing.assert_array_equal(ema_update(t, s, 0.0).ravel(), s.ravel())


def test_direct_formula():
    one = ModelParams(np.ones((1, 1)), np.ones(1), np.ones((1, 1)), np.ones(1))
    zero = one.zeros_like()
    out = ema_update(one, zero, 0.9)
    np.testing.assert_allclose(out.ravel(), 0.9, atol=1e-15)


def test_student_untouched():
    t, s = init_params(0, (3, 4, 2)), init_params(1, (3, 4, 2))
    before = s.checksum()
    ema_update(t, s, 0.5)
    assert s.checksum() == before


def test_errors():
    t = init_params(0, (3, 4, 2))
    with pytest.raises(ValueError):
        ema_update(t, init_params(0, (3, 5, 2)), 0.5)
    with pytest.raises(ValueError):
        ema_update(t, t, 1.5)


@pytest.mark.parametrize("alpha", [0.5, 0.9, 0.999])
def test_geometric_contraction(alpha):
    t, s = init_params(0, (4, 6, 3)), init_params(7, (4, 6, 3))
    gap = np.max(np.abs(t.ravel() - s.ravel()))
    for _ in range(100):
        t = ema_update(t, s, alpha)
        new_gap = np.max(np.abs(t.ravel() - s.ravel()))
        assert abs(new_gap - alpha * gap) <= 1e-12
        gap = new_gap
