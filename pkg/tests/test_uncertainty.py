import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoforecast import ndtensor as nd
from egoforecast.ndtensor import ContractError, NumericError
from egoforecast.uncertainty import RHO_MAX, Gauss2D, fuse, nll, nll_rows, sample, sample_moments


def density_nll(y, mu, sigma, rho):
    """-log of the bivariate normal density via explicit covariance inverse."""
    cov = np.array([[sigma[0] ** 2, rho * sigma[0] * sigma[1]], [rho * sigma[0] * sigma[1], sigma[1] ** 2]])
    d = np.asarray(y) - np.asarray(mu)
    q = d @ np.linalg.inv(cov) @ d
    return 0.5 * q + 0.5 * math.log(np.linalg.det(cov)) + math.log(2 * math.pi)


def fuse_bruteforce(means, variances):
    """Per-dimension loops: average of squares minus square of average, plus mean variance."""
    means = np.asarray(means)
    n = len(means)
    flat_m = means.reshape(n, -1)
    flat_v = np.asarray(variances).reshape(n, -1)
    out_mean, out_var, out_epi = [], [], []
    for j in range(flat_m.shape[1]):
        col = [float(flat_m[i, j]) for i in range(n)]
        mu = math.fsum(col) / n
        epi = math.fsum(c * c for c in col) / n - mu * mu
        ale = math.fsum(float(flat_v[i, j]) for i in range(n)) / n
        out_mean.append(mu)
        out_epi.append(epi)
        out_var.append(epi + ale)
    shape = means.shape[1:]
    return np.reshape(out_mean, shape), np.reshape(out_var, shape), np.reshape(out_epi, shape)


class TestNll:
    @given(
        st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 1), st.floats(-2, 1), st.floats(-2, 2),
        st.floats(-4, 4), st.floats(-4, 4),
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_closed_form_density(self, m1, m2, s1, s2, r, y1, y2):
        g = Gauss2D(np.array([m1, m2]), np.array([s1, s2]), np.array(r))
        want = density_nll([y1, y2], [m1, m2], np.exp([s1, s2]), float(g.rho))
        assert nll(np.array([y1, y2]), g) == pytest.approx(want, rel=1e-9, abs=1e-9)

    def test_standard_normal_at_mean(self):
        g = Gauss2D(np.zeros(2), np.zeros(2), np.array(0.0))
        assert nll(np.zeros(2), g) == pytest.approx(math.log(2 * math.pi), abs=1e-15)

    def test_correlation_is_clamped(self):
        g = Gauss2D(np.zeros(2), np.zeros(2), np.array(50.0))
        assert g.rho == RHO_MAX
        assert np.isfinite(nll(np.array([1.0, -1.0]), g))

    def test_non_finite_observation_rejected(self):
        g = Gauss2D(np.zeros(2), np.zeros(2), np.array(0.0))
        with pytest.raises(NumericError):
            nll(np.array([np.nan, 0.0]), g)

    @pytest.mark.parametrize("offset", [0, 5])
    def test_gradient_of_each_factor(self, offset):
        rng = np.random.default_rng(offset)
        out = rng.normal(scale=0.5, size=(4, 10))
        y = rng.normal(size=(4, 2))
        err = nd.finite_diff_check(lambda p: nd.sum_(nll_rows(y, p, offset)), out)
        assert err < 1e-4

    def test_covariance_positive_definite(self):
        rng = np.random.default_rng(1)
        g = Gauss2D(rng.normal(size=(50, 2)), rng.normal(size=(50, 2)), rng.normal(scale=3, size=50))
        assert (np.linalg.eigvalsh(g.covariance()) > 0).all()


class TestFuse:
    def test_matches_bruteforce_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 17))
            means = rng.normal(scale=rng.uniform(0.01, 10), size=(n, 3, 2))
            variances = rng.uniform(0, 5, size=(n, 3, 2))
            f = fuse(means, variances)
            m, v, e = fuse_bruteforce(means, variances)
            np.testing.assert_allclose(f.mean, m, rtol=0, atol=1e-12)
            if n > 1:
                np.testing.assert_allclose(f.epistemic, np.maximum(e, 0), rtol=0, atol=1e-12)
                np.testing.assert_allclose(f.variance, np.maximum(e, 0) + f.aleatoric, rtol=0, atol=1e-12)

    def test_identical_samples_give_exactly_zero_epistemic(self):
        means = np.tile(np.array([[0.1, 1 / 3.0]]), (7, 1))
        f = fuse(means, np.ones_like(means))
        assert (f.epistemic == 0.0).all()
        np.testing.assert_array_equal(f.variance, np.ones(2))

    def test_single_sample(self):
        f = fuse(np.array([[2.0, -1.0]]), np.array([[0.5, 0.25]]))
        assert (f.epistemic == 0.0).all()
        np.testing.assert_array_equal(f.mean, [2.0, -1.0])

    @given(st.integers(2, 16), st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_variance_dominates_each_part(self, n, seed):
        rng = np.random.default_rng(seed)
        f = fuse(rng.normal(size=(n, 4)), rng.uniform(0, 2, size=(n, 4)))
        assert (f.variance >= f.epistemic).all() and (f.variance >= f.aleatoric).all()

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            fuse(np.zeros((0, 2)), np.zeros((0, 2)))
        with pytest.raises(ContractError):
            fuse(np.zeros((3, 2)), np.zeros((3, 3)))


class TestSampling:
    def test_moments_of_many_draws(self):
        rng = np.random.default_rng(11)
        g = Gauss2D(np.array([1.5, -2.0]), np.log(np.array([0.7, 1.8])), np.array(np.arctanh(0.6)))
        x = sample(Gauss2D(np.tile(g.mu, (100_000, 1)), np.tile(g.log_sigma, (100_000, 1)),
                           np.full(100_000, g.corr_raw)), rng)
        cov = np.cov(x.T)
        want = g.covariance()
        np.testing.assert_allclose(x.mean(axis=0), g.mu, rtol=0.03)
        np.testing.assert_allclose(cov, want, rtol=0.03)

    def test_zero_sigma_returns_mean(self):
        out = sample_moments(np.array([1.0, 2.0]), np.zeros(2), np.array(0.3), z=np.array([5.0, -5.0]))
        np.testing.assert_array_equal(out, [1.0, 2.0])

    def test_reused_draw_is_deterministic(self):
        z = np.array([0.3, -1.1])
        a = sample_moments(np.zeros(2), np.ones(2), np.array(0.5), z=z)
        b = sample_moments(np.zeros(2), np.ones(2), np.array(0.5), z=z)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, [0.3, 0.5 * 0.3 + math.sqrt(0.75) * -1.1], rtol=0, atol=1e-15)
