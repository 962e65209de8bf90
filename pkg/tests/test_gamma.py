import math

import numpy as np
import pytest
from scipy import integrate, stats

from strata.errors import NumericalError
from strata.gamma import (
    GammaMixture,
    ecm_fit,
    ecm_step,
    elevation_nll,
    gamma_logpdf,
    init_mixture,
    load_mixture,
    responsibilities,
    save_mixture,
    solve_shape,
)


def sample_mixture(rng, n, weight, c1, c2):
    first = rng.random(n) < weight
    z = np.where(first, rng.gamma(c1[0], c1[1], n), rng.gamma(c2[0], c2[1], n))
    return z


def test_logpdf_closed_forms():
    assert gamma_logpdf(1.0, 1.0, 1.0) == pytest.approx(-1.0)
    assert gamma_logpdf(1.0, 2.0, 1.0) == pytest.approx(-1.0)


def test_logpdf_matches_scipy(rng):
    z = rng.uniform(0.01, 5, 20)
    np.testing.assert_allclose(gamma_logpdf(z, 2.5, 0.7), stats.gamma.logpdf(z, 2.5, scale=0.7), rtol=1e-12)


@pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, 0.0)])
def test_logpdf_rejects_nonpositive(args):
    with pytest.raises(ValueError):
        gamma_logpdf(*args)


@pytest.mark.parametrize("seed", range(5))
def test_pdf_integrates_to_one(seed):
    rng = np.random.default_rng(seed)
    k, theta = rng.uniform(0.5, 5, 2)
    val, _ = integrate.quad(lambda z: math.exp(gamma_logpdf(z, k, theta)), 0, 50 * theta, limit=200, epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_mixture_pdf_integrates_to_one():
    mix = GammaMixture(0.3, 1.2, 0.1, 3.0, 0.8)
    val, _ = integrate.quad(lambda z: math.exp(mix.logpdf(np.array([z]))[0]), 0, 40, limit=400, points=[0.1, 1, 3])
    assert val == pytest.approx(1.0, abs=1e-6)


def test_mixture_validation():
    with pytest.raises(ValueError):
        GammaMixture(1.0, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        GammaMixture(0.5, 1, -1, 1, 1)


def test_responsibilities_identical_components():
    mix = GammaMixture(0.3, 2.0, 0.5, 2.0, 0.5)
    r = responsibilities(mix, np.array([0.1, 1.0, 3.0]))
    np.testing.assert_allclose(r, [[0.3, 0.7]] * 3)


def test_responsibilities_tail_and_sum():
    mix = GammaMixture(0.6, 1.5, 0.05, 3.0, 0.8)
    r = responsibilities(mix, np.array([1e-3, 0.05, 2.5, 400.0]))
    assert r[2, 1] > 0.99
    assert r[3, 1] > 0.99  # both densities underflow here
    np.testing.assert_array_equal(r.sum(axis=1), 1.0)


def test_solve_shape_inverts_profile(rng):
    from scipy.special import digamma

    for k in [0.05, 0.7, 3.0, 40.0]:
        c = math.log(k) - digamma(k)
        assert solve_shape(c, 1.0) == pytest.approx(k, rel=1e-9)


def test_recovers_separated_mixture():
    rng = np.random.default_rng(7)
    z = sample_mixture(rng, 10_000, 0.6, (1.5, 0.05), (3.0, 0.8))
    hist = []
    mix = ecm_fit(z, init_mixture(z), history=hist)
    assert abs(mix.weight - 0.6) <= 0.05
    for got, want in [(mix.k1, 1.5), (mix.theta1, 0.05), (mix.k2, 3.0), (mix.theta2, 0.8)]:
        assert abs(got - want) <= 0.1 * want
    assert np.all(np.diff(hist) >= -1e-9)


def test_single_gamma_fit():
    # components of a mixture fitted to one Gamma are not identifiable;
    # the likelihood and the overall moments are
    rng = np.random.default_rng(8)
    z = rng.gamma(2.0, 0.1, 10_000)
    mix = ecm_fit(z, init_mixture(z, split=float(np.median(z))))
    true_ll = float(stats.gamma.logpdf(z, 2.0, scale=0.1).sum())
    assert abs(mix.loglik(z) - true_ll) <= 0.005 * abs(true_ll)
    w = np.array([mix.weight, 1 - mix.weight])
    means = np.array([mix.k1 * mix.theta1, mix.k2 * mix.theta2])
    second = np.array([mix.k1 * (mix.k1 + 1) * mix.theta1**2, mix.k2 * (mix.k2 + 1) * mix.theta2**2])
    mean = w @ means
    assert mean == pytest.approx(0.2, rel=0.1)
    assert w @ second - mean**2 == pytest.approx(0.02, rel=0.1)


def test_single_step_never_decreases():
    rng = np.random.default_rng(9)
    z = sample_mixture(rng, 2000, 0.5, (1.0, 0.1), (2.0, 1.0))
    log_z = np.log(z)
    for _ in range(100):
        k1, t1, k2, t2 = rng.uniform(0.2, 5, 4)
        mix = GammaMixture(float(rng.uniform(0.05, 0.95)), k1, t1, k2, t2)
        assert ecm_step(z, log_z, mix).loglik(z) >= mix.loglik(z) - 1e-9


def test_fit_never_below_init():
    rng = np.random.default_rng(10)
    z = rng.gamma(1.3, 0.4, 500)
    init = GammaMixture(0.2, 4.0, 0.01, 0.5, 3.0)
    assert ecm_fit(z, init).loglik(z) >= init.loglik(z)


def test_zero_variance_rejected():
    with pytest.raises(NumericalError, match="zero-variance elevations"):
        ecm_fit(np.full(50, 0.3))


def test_too_few_samples():
    with pytest.raises(ValueError):
        ecm_fit(np.arange(1, 6, dtype=float))


def test_fit_deterministic():
    z = np.random.default_rng(11).gamma(2.0, 0.3, 3000)
    assert ecm_fit(z) == ecm_fit(z)


def test_nll_unit_density():
    # Exponential(1) at z=1 has density e^-1
    mix = GammaMixture(0.5, 1.0, 1.0, 5.0, 2.0)
    probs = np.tile([0.5, 0.5, 0.0, 0.0], (4, 1))
    loss, _ = elevation_nll(mix, probs, np.ones(4))
    assert loss == pytest.approx(1.0)


def test_nll_uniform_probs(rng):
    mix = GammaMixture(0.7, 1.5, 0.05, 3.0, 0.8)
    z = rng.gamma(2.0, 0.5, 30)
    loss, _ = elevation_nll(mix, np.full((30, 4), 0.25), z)
    f1 = stats.gamma.logpdf(z, 1.5, scale=0.05)
    f2 = stats.gamma.logpdf(z, 3.0, scale=0.8)
    assert loss == pytest.approx(float(np.mean(-(0.5 * f1 + 0.5 * f2))), rel=1e-12)


def test_nll_gradient_finite_difference(rng):
    mix = GammaMixture(0.7, 1.5, 0.05, 3.0, 0.8)
    z = np.concatenate([[0.0], rng.gamma(2.0, 0.5, 9)])  # zero is clipped to eps
    probs = rng.dirichlet(np.ones(4), size=10)
    _, grad = elevation_nll(mix, probs, z)
    h = 1e-4
    for i in range(10):
        for c in range(4):
            p = probs.copy()
            p[i, c] += h
            fp = elevation_nll(mix, p, z)[0]
            p[i, c] -= 2 * h
            fm = elevation_nll(mix, p, z)[0]
            num = (fp - fm) / (2 * h)
            assert abs(num - grad[i, c]) <= 1e-6 * max(abs(grad[i, c]), 1e-12)


def test_mixture_text_roundtrip(tmp_path):
    mix = GammaMixture(0.61234, 1.5, 0.05123, 3.0, 0.79999)
    save_mixture(mix, tmp_path / "m.txt")
    assert load_mixture(tmp_path / "m.txt") == mix
    assert (tmp_path / "m.txt").read_text() == "0.61234 1.50000 0.05123 3.00000 0.79999\n"
