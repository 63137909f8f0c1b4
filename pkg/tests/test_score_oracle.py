import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from conftest import random_spd
from freehunch.experiments import default_toy_mixture
from freehunch.score_oracle import (
    GaussianMixture,
    LinearObservation,
    NoiseSchedule,
    UnsupportedOperatorError,
    convolution_operator,
    gmm_conditional_score,
    gmm_denoiser_mean_cov,
    gmm_denoiser_moments,
    gmm_log_density,
    gmm_posterior_given_y,
    gmm_score,
    masking_operator,
)


def random_mixture(rng, k=3, n=2):
    w = rng.uniform(0.5, 1.5, k)
    return GaussianMixture(
        w / w.sum(), rng.uniform(-2, 2, (k, n)), np.array([random_spd(rng, n, 4.0) * 0.3 for _ in range(k)])
    )


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_hessian(f, x, h=1e-3):
    n = x.size
    hess = np.zeros((n, n))
    eye = np.eye(n) * h
    for i in range(n):
        for j in range(n):
            hess[i, j] = (
                f(x + eye[i] + eye[j]) - f(x + eye[i] - eye[j]) - f(x - eye[i] + eye[j]) + f(x - eye[i] - eye[j])
            ) / (4 * h * h)
    return 0.5 * (hess + hess.T)


class TestMixture:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            GaussianMixture.gaussian(np.zeros(2), np.diag([1.0, -1.0]))

    def test_moments(self, rng):
        gmm = random_mixture(rng)
        x = gmm.sample(200_000, rng)
        np.testing.assert_allclose(x.mean(0), gmm.mean(), atol=0.02)
        np.testing.assert_allclose(np.cov(x.T), gmm.covariance(), atol=0.05)

    def test_observation_rules(self):
        with pytest.raises(ValueError):
            LinearObservation(np.ones(2), -1.0)
        with pytest.raises(ValueError):
            LinearObservation(np.ones(2), 1.0, np.eye(3))
        obs = LinearObservation(np.ones(2), 0.0, masking_operator([True, False, True]))
        np.testing.assert_array_equal(obs.forward([1.0, 2.0, 3.0]), [1.0, 3.0])
        np.testing.assert_array_equal(obs.adjoint([1.0, 3.0]), [1.0, 0.0, 3.0])

    def test_convolution_adjoint(self, rng):
        op = convolution_operator([0.25, 0.5, 0.25, 0.1], 9)
        u, v = rng.standard_normal((2, 9))
        assert abs(op.matvec(u) @ v - u @ op.rmatvec(v)) < 1e-12

    def test_schedule(self):
        s = NoiseSchedule()
        assert s.sigma(0.0) == 0.0 and s.sigma(3.0) == 3.0
        with pytest.raises(ValueError):
            NoiseSchedule(1.0, 0.5)


class TestDensity:
    def test_standard_normal_mode(self):
        gmm = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
        assert abs(gmm_log_density(gmm, np.zeros(2), 0.0) + np.log(2 * np.pi)) < 1e-14

    def test_matches_scipy(self, rng):
        gmm = random_mixture(rng)
        x = rng.standard_normal(2)
        ref = sum(
            w * multivariate_normal(m, c + 0.49 * np.eye(2)).pdf(x)
            for w, m, c in zip(gmm.weights, gmm.means, gmm.covariances)
        )
        assert abs(gmm_log_density(gmm, x, 0.7) - np.log(ref)) < 1e-12

    def test_integrates_to_one(self, rng):
        gmm = random_mixture(rng)
        g = np.linspace(-9, 9, 721)
        xx, yy = np.meshgrid(g, g)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        p = np.exp(gmm_log_density(gmm, pts, 0.5))
        assert abs(p.sum() * (g[1] - g[0]) ** 2 - 1.0) < 1e-3

    def test_monotone_along_rays(self, rng):
        gmm = GaussianMixture.gaussian(np.array([1.0, -1.0]), random_spd(rng, 2))
        d = rng.standard_normal(2)
        vals = gmm_log_density(gmm, gmm.means[0] + np.linspace(0, 5, 50)[:, None] * d, 0.3)
        assert np.all(np.diff(vals) < 0)

    def test_far_tail_is_finite(self):
        gmm = default_toy_mixture()
        assert np.isfinite(gmm_log_density(gmm, np.array([1e3, -1e3]), 0.1))
        assert np.all(np.isfinite(gmm_score(gmm, np.array([1e3, -1e3]), 0.1)))

    def test_heat_semigroup(self, rng):
        gmm = random_mixture(rng)
        s1, s2 = 0.6, 1.3
        smoothed = GaussianMixture(gmm.weights, gmm.means, gmm.covariances + s1**2 * np.eye(2))
        pts = rng.uniform(-4, 4, (200, 2))
        np.testing.assert_allclose(
            gmm_log_density(smoothed, pts, s2), gmm_log_density(gmm, pts, np.hypot(s1, s2)), atol=1e-8
        )


class TestScore:
    def test_single_gaussian(self):
        gmm = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
        np.testing.assert_allclose(gmm_score(gmm, np.array([2.0, 0.0]), 1.0), [-1.0, 0.0])

    def test_points_toward_other_component(self):
        gmm = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.eye(2)[None].repeat(2, 0) * 0.2)
        s = gmm_score(gmm, np.array([-1.0, 0.0]), 0.5)
        assert s[0] > 0

    def test_finite_differences_200_probes(self, rng):
        worst = 0.0
        for _ in range(200):
            gmm = random_mixture(rng, k=int(rng.integers(1, 4)))
            x = rng.uniform(-3, 3, 2)
            sigma = float(rng.uniform(0.2, 3.0))
            fd = fd_gradient(lambda z: gmm_log_density(gmm, z, sigma), x)
            s = gmm_score(gmm, x, sigma)
            worst = max(worst, np.linalg.norm(s - fd) / max(np.linalg.norm(s), 1e-3))
        assert worst < 1e-5

    def test_batch_matches_single(self, rng):
        gmm = random_mixture(rng)
        pts = rng.standard_normal((5, 2))
        np.testing.assert_allclose(gmm_score(gmm, pts, 0.8), np.array([gmm_score(gmm, p, 0.8) for p in pts]))


class TestDenoiser:
    def test_gaussian_conjugacy(self):
        gmm = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
        m = gmm_denoiser_moments(gmm, np.array([1.0, 1.0]), 1.0)
        np.testing.assert_allclose(m.mean, [0.5, 0.5])
        np.testing.assert_allclose(m.dense_covariance(), 0.5 * np.eye(2))

    @given(st.integers(0, 2**32 - 1))
    def test_tweedie_mean(self, seed):
        rng = np.random.default_rng(seed)
        gmm = random_mixture(rng)
        x = rng.uniform(-4, 4, 2)
        sigma = float(rng.uniform(0.05, 10))
        mean, _ = gmm_denoiser_mean_cov(gmm, x, sigma)
        np.testing.assert_allclose(mean, x + sigma**2 * gmm_score(gmm, x, sigma), rtol=1e-12, atol=1e-12 * sigma**2)

    def test_covariance_from_hessian(self, rng):
        for _ in range(20):
            gmm = random_mixture(rng)
            x = rng.uniform(-3, 3, 2)
            sigma = float(rng.uniform(0.4, 2.0))
            h = fd_hessian(lambda z: gmm_log_density(gmm, z, sigma), x)
            expect = sigma**2 * (sigma**2 * h + np.eye(2))
            cov = gmm_denoiser_moments(gmm, x, sigma).dense_covariance()
            assert np.linalg.norm(cov - expect) <= 1e-4 * np.linalg.norm(cov)

    @pytest.mark.parametrize("sigma", [0.002, 0.05, 0.5])
    def test_small_sigma_keeps_data_precision(self, rng, sigma):
        # the data precision is a sigma^2-sized correction to sigma^2 I and must survive rounding
        c = random_spd(rng, 4, 10.0)
        cov = gmm_denoiser_moments(GaussianMixture.gaussian(np.zeros(4), c), rng.standard_normal(4), sigma).dense_covariance()
        recovered = np.linalg.inv(cov) - np.eye(4) / sigma**2
        truth = np.linalg.inv(c)
        assert np.linalg.norm(recovered - truth) <= 1e-12 / sigma**2 * np.linalg.norm(truth)

    def test_large_sigma_gives_data_covariance(self, rng):
        gmm = random_mixture(rng)
        cov = gmm_denoiser_moments(gmm, rng.standard_normal(2), 1e3).dense_covariance()
        truth = gmm.covariance()
        assert np.linalg.norm(cov - truth) <= 1e-3 * np.linalg.norm(truth)

    def test_batched_shapes(self, rng):
        gmm = random_mixture(rng)
        pts = rng.standard_normal((4, 2))
        mean, cov = gmm_denoiser_mean_cov(gmm, pts, 0.9)
        assert mean.shape == (4, 2) and cov.shape == (4, 2, 2)
        single = gmm_denoiser_moments(gmm, pts[2], 0.9)
        np.testing.assert_allclose(cov[2], single.dense_covariance(), atol=1e-13)


class TestPosterior:
    def test_scalar_conditional_score(self):
        gmm = GaussianMixture.gaussian(np.zeros(1), np.eye(1))
        obs = LinearObservation(np.array([1.0]), 1.0)
        np.testing.assert_allclose(gmm_conditional_score(gmm, obs, np.zeros(1), 1.0), [1 / 3])

    def test_uninformative_limit(self, rng):
        gmm = random_mixture(rng)
        obs = LinearObservation(np.array([0.3, -0.2]), 1e6)
        for _ in range(10):
            x = rng.uniform(-3, 3, 2)
            s = gmm_score(gmm, x, 0.7)
            c = gmm_conditional_score(gmm, obs, x, 0.7)
            assert np.linalg.norm(c - s) <= 1e-4 * np.linalg.norm(s)

    def test_conditional_score_by_quadrature(self, rng):
        gmm = random_mixture(rng, k=2)
        obs = LinearObservation(np.array([0.5, 0.2]), 0.8)
        sigma = 0.9
        g = np.linspace(-9, 9, 361)
        xx, yy = np.meshgrid(g, g)
        grid = np.column_stack([xx.ravel(), yy.ravel()])
        log_w = gmm_log_density(gmm, grid, 0.0) - 0.5 * np.sum((grid - obs.observation) ** 2, 1) / obs.noise_std**2

        def log_marginal(z):
            a = log_w - 0.5 * np.sum((grid - z) ** 2, 1) / sigma**2
            top = a.max()
            return top + np.log(np.exp(a - top).sum())

        for _ in range(5):
            x = rng.uniform(-2, 2, 2)
            fd = fd_gradient(log_marginal, x, 1e-4)
            c = gmm_conditional_score(gmm, obs, x, sigma)
            assert np.linalg.norm(c - fd) <= 1e-4 * np.linalg.norm(c)

    def test_gaussian_posterior(self, rng):
        cov = random_spd(rng, 2)
        mu = np.array([0.3, -0.7])
        obs = LinearObservation(np.array([1.0, 0.5]), 0.6)
        post = gmm_posterior_given_y(GaussianMixture.gaussian(mu, cov), obs)
        prec_y = np.eye(2) / 0.36
        expect = np.linalg.solve(np.linalg.inv(cov) + prec_y, np.linalg.solve(cov, mu) + prec_y @ obs.observation)
        np.testing.assert_allclose(post.means[0], expect, atol=1e-12)

    def test_symmetric_weights_remain_uniform(self):
        gmm = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.eye(2)[None].repeat(2, 0))
        post = gmm_posterior_given_y(gmm, LinearObservation(np.zeros(2), 0.5))
        np.testing.assert_allclose(post.weights, [0.5, 0.5], atol=1e-14)

    def test_monte_carlo_moments(self, rng):
        gmm = default_toy_mixture()
        post = gmm_posterior_given_y(gmm, LinearObservation(np.array([0.8, 1.1]), 0.6))
        x = post.sample(100_000, rng)
        se = np.sqrt(np.diag(post.covariance()) / x.shape[0])
        assert np.all(np.abs(x.mean(0) - post.mean()) <= 3 * se)

    def test_non_identity_rejected(self):
        gmm = GaussianMixture.gaussian(np.zeros(2), np.eye(2))
        obs = LinearObservation(np.ones(1), 0.5, masking_operator([True, False]))
        with pytest.raises(UnsupportedOperatorError):
            gmm_posterior_given_y(gmm, obs)
        with pytest.raises(UnsupportedOperatorError):
            gmm_conditional_score(gmm, obs, np.zeros(2), 1.0)

    def test_noiseless_rejected(self):
        with pytest.raises(ValueError):
            gmm_posterior_given_y(GaussianMixture.gaussian(np.zeros(1), np.eye(1)), LinearObservation(np.ones(1), 0.0))
