import numpy as np
import pytest

from tsrbnn.binkernel.fold import (
    CONST,
    GEQ,
    LEQ,
    Thresholds,
    float_thresholds,
    fold_bn_sign,
    integer_thresholds,
    reference_bits,
)
from tsrbnn.layers import BatchNorm


def test_fold_examples():
    p = fold_bn_sign(2.0, 1.0, 0.0, 1.0, eps=0.0)
    assert p.tau[0] == pytest.approx(-0.5) and p.direction[0] == GEQ
    p = fold_bn_sign(1.0, 0.0, 5.0, 1.0, eps=0.0)
    assert p.tau[0] == pytest.approx(5.0) and p.direction[0] == GEQ
    p = fold_bn_sign(-1.0, 0.0, 0.0, 1.0, eps=0.0)
    assert p.tau[0] == pytest.approx(0.0) and p.direction[0] == LEQ


def test_fold_degenerate_gamma():
    p = fold_bn_sign([0.0, 0.0], [0.3, -0.3], [0, 0], [1, 1])
    assert list(p.direction) == [CONST, CONST]
    assert list(p.constant) == [True, False]


def test_fold_rejects_negative_variance():
    with pytest.raises(ValueError):
        fold_bn_sign(1.0, 0.0, 0.0, -1.0)


def test_analytic_fold_matches_direct_bn_off_ties(rng):
    gamma, beta = rng.normal(size=8), rng.normal(size=8)
    mean, var = rng.normal(size=8) * 3, rng.uniform(0.1, 3, size=8)
    p = fold_bn_sign(gamma, beta, mean, var, eps=1e-3)
    x = rng.normal(size=(500, 8)) * 5
    direct = gamma * (x - mean) / np.sqrt(var + 1e-3) + beta >= 0
    folded = np.where(p.direction == GEQ, x >= p.tau, x <= p.tau)
    np.testing.assert_array_equal(direct, folded)


def _bn(gamma, beta, mean, var):
    bn = BatchNorm(len(gamma))
    bn.gamma.value[:] = gamma
    bn.beta.value[:] = beta
    bn.moving_mean[:] = mean
    bn.moving_var[:] = var
    return bn


@pytest.mark.parametrize("gamma", [-2.0, -1.0, 0.0, 1.0, 2.0])
def test_integer_thresholds_exhaustive(rng, gamma):
    c = 64
    bn = _bn(np.full(c, gamma), rng.normal(size=c) * 4, rng.integers(-9, 10, size=c) * 1.0,
             rng.uniform(0.0, 4.0, size=c))
    # put some channels exactly on an integer boundary: shift / scale integral
    bn.beta.value[:8] = 0.0
    scale, shift = bn.inference_affine()
    thr = integer_thresholds(scale, shift, -9, 9)
    x = np.arange(-9, 10, dtype=np.float32)[:, None].repeat(c, 1)
    direct = bn.forward(x[:, None, None, :])[:, 0, 0, :] >= 0
    np.testing.assert_array_equal(thr.apply(x.astype(np.int64)), direct)


def test_integer_thresholds_saturate_outside_range():
    scale = np.array([1.0, 1.0, -1.0, -1.0], np.float32)
    shift = np.array([100.0, -100.0, 100.0, -100.0], np.float32)
    thr = integer_thresholds(scale, shift, -5, 5)
    x = np.arange(-5, 6)[:, None].repeat(4, 1)
    np.testing.assert_array_equal(thr.apply(x), reference_bits(x, scale, shift))


def test_float_thresholds_exact_on_boundary(rng):
    c = 32
    scale = (rng.normal(size=c) * 3).astype(np.float32)
    scale[:4] = 0
    shift = rng.normal(size=c).astype(np.float32)
    thr = float_thresholds(scale, shift)
    assert thr.values.dtype == np.float32
    x = rng.normal(size=(2000, c)).astype(np.float32) * 2
    # neighbours of every threshold stress the boundary itself
    t = thr.values
    near = np.stack([t, np.nextafter(t, np.float32(np.inf)), np.nextafter(t, np.float32(-np.inf))])
    x = np.concatenate([x, near[np.isfinite(near).all(axis=1)]])
    np.testing.assert_array_equal(thr.apply(x), reference_bits(x, scale, shift))


def test_threshold_sign_is_plain_sign():
    thr = Thresholds.sign(3, integer=True)
    x = np.array([[-1, 0, 1]])
    np.testing.assert_array_equal(thr.apply(x), [[False, True, True]])


def test_maxpool_threshold_commutation_exhaustive():
    # all 2x2 integer windows over [-9, 9]: GEQ commutes with OR, LEQ with AND
    v = np.arange(-9, 10)
    win = np.stack(np.meshgrid(v, v, v, v, indexing="ij"), -1).reshape(-1, 4)
    mx = win.max(axis=1)
    for tau in (-9, -3, 0, 4, 10):
        assert np.array_equal((win >= tau).any(axis=1), mx >= tau)
        assert np.array_equal((win <= tau).all(axis=1), mx <= tau)
