import math

import numpy as np
import pytest

from strata.errors import NumericalError
from strata.loss import LossConfig, binary_entropy, data_loss, entropy_loss, total_loss
from strata.raster import disk_mask, project


def rasters_with(values_per_stratum, K=8):
    rs = project(np.full((1, 4), 0.25), np.zeros((1, 2)), K)
    mask = disk_mask(K, 10.0)
    for r, v in zip(rs, values_per_stratum):
        r.values = np.where(mask, v, 0.0)
    return rs


def test_data_loss_zero_iff_equal():
    assert data_loss([0.2, 0.3, 0.4], [0.2, 0.3, 0.4])[0] == 0.0
    assert data_loss([0.2, 0.3, 0.4], [0.2, 0.3, 0.41])[0] > 0.0
    loss, grad = data_loss([0.5, 0.0, 1.0], [0.2, 0.0, 0.0])
    assert loss == pytest.approx((0.3 + 1.0) / 3)
    np.testing.assert_array_equal(grad, [1 / 3, 0, 1 / 3])


@pytest.mark.parametrize("v, expected", [(0.0, 0.0), (1.0, 0.0), (0.5, math.log(2))])
def test_entropy_extremes(v, expected):
    loss, grads = entropy_loss(rasters_with([v, v, v]))
    assert loss == pytest.approx(expected, abs=1e-6)
    assert 0.0 <= loss <= math.log(2) + 1e-15


def test_entropy_bounds_random(rng):
    for _ in range(20):
        rs = rasters_with([0, 0, 0])
        for r in rs:
            r.values = np.where(r.mask, rng.random(r.values.shape), 0.0)
        loss, _ = entropy_loss(rs)
        assert 0.0 <= loss <= math.log(2)


def test_entropy_zero_gradient_at_clamps():
    _, grads = entropy_loss(rasters_with([0.0, 1.0, 0.0]))
    assert all(np.all(g == 0) for g in grads)


def test_entropy_gradient_finite_difference(rng):
    rs = rasters_with([0, 0, 0], K=4)
    for r in rs:
        r.values = np.where(r.mask, rng.uniform(0.05, 0.95, r.values.shape), 0.0)
    _, grads = entropy_loss(rs)
    h = 1e-6
    for s, r in enumerate(rs):
        for i, j in zip(*np.nonzero(r.mask)):
            old = r.values[i, j]
            r.values[i, j] = old + h
            fp = entropy_loss(rs)[0]
            r.values[i, j] = old - h
            fm = entropy_loss(rs)[0]
            r.values[i, j] = old
            assert (fp - fm) / (2 * h) == pytest.approx(grads[s][i, j], rel=1e-5)


def test_binary_entropy_symmetric(rng):
    o = rng.random(100)
    np.testing.assert_allclose(binary_entropy(o), binary_entropy(1 - o), atol=1e-12)


def test_total_loss_weights():
    assert total_loss(0.1, 0.5, -2.0) == pytest.approx(0.1 + 0.2 * 0.5 - 2.0)
    assert total_loss(0.1, 0.5, 2.0, LossConfig(alpha=0, lam=0)) == 0.1


def test_total_loss_nonfinite():
    with pytest.raises(NumericalError):
        total_loss(0.1, math.nan, 0.0)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)
