"""Site-update rules against dense-quadrature oracles and closed forms.

Oracle strategy: every cubature-based quantity (tilted moments, statistical
linearisation integrals, expected log-likelihood derivatives) is recomputed
on a dense trapezoid grid (>= 2e5 nodes, +/- 10 sd) by independent scalar
code, and the site algebra is re-applied to those oracle integrals.  The
implementation must agree to 1e-5 or better.  Conjugate (Gaussian) cases are
exact fixed points for every rule and are checked at 1e-8.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markovgp.cubature import gauss_hermite, make_rule, ut5
from markovgp.likelihoods import (
    BernoulliLogit,
    BernoulliProbit,
    Gaussian,
    HeteroscedasticGaussian,
    Poisson,
)
from markovgp.sites import (
    Cavity,
    GaussianMoments,
    RuleConfig,
    Site,
    compute_cavity,
    cvi_update,
    eep_update,
    pep_update,
    site_natural_params,
    slep_update,
)

GH20 = gauss_hermite(1, 20)
GH50 = gauss_hermite(1, 50)


# ---------------------------------------------------------------------------
# dense scalar oracles (independent implementations)
# ---------------------------------------------------------------------------


def dense_grid(mu, var, n=200_001, span=10.0):
    sd = math.sqrt(var)
    f = np.linspace(mu - span * sd, mu + span * sd, n)
    log_gauss = -0.5 * ((f - mu) ** 2 / var + math.log(2 * math.pi * var))
    return f, log_gauss


def pep_site_oracle(likelihood, y, mu, var, alpha):
    """Tilted moments by trapezoid, then the closed-form site algebra."""
    f, log_gauss = dense_grid(mu, var)
    la = alpha * likelihood.log_density(y, f[None, :]) + log_gauss
    w = np.exp(la - la.max())
    z = np.trapezoid(w, f)
    mhat = np.trapezoid(w * f, f) / z
    chat = np.trapezoid(w * (f - mhat) ** 2, f) / z
    grad = (mhat - mu) / var
    hess = (chat / var - 1.0) / var
    return mu - grad / hess, -alpha * (var + 1.0 / hess)


def slep_site_oracle(likelihood, y, mu, var, alpha):
    """Statistical-linearisation integrals by trapezoid, then site algebra."""
    f, log_gauss = dense_grid(mu, var)
    q = np.exp(log_gauss)
    cm, cv = likelihood.conditional_moments(f[None, :])
    mu_obs = np.trapezoid(q * cm, f)
    s_obs = np.trapezoid(q * (cm - mu_obs) ** 2, f) + np.trapezoid(q * cv, f)
    cross = np.trapezoid(q * (f - mu) * (cm - mu_obs), f)
    omega = cross / var
    s_tilde = s_obs + (alpha - 1.0) * cross * cross / var
    info_inv = s_tilde / (omega * omega)
    site_mu = mu + info_inv * (omega / s_tilde) * (y - mu_obs)
    site_var = -alpha * var + info_inv
    return site_mu, site_var


def cvi_site_oracle(likelihood, y, mu, var):
    """Expected log-likelihood derivatives by trapezoid, then site algebra."""
    f, log_gauss = dense_grid(mu, var)
    q = np.exp(log_gauss)
    logp = likelihood.log_density(y, f[None, :])
    d = f - mu
    grad = np.trapezoid(q * logp * d / var, f)
    hess = np.trapezoid(q * logp * (d * d / var**2 - 1.0 / var), f)
    return mu - grad / hess, -1.0 / hess


SCALAR_MODELS = [
    (Poisson(), lambda rng: rng.poisson(2.0)),
    (BernoulliLogit(), lambda rng: int(rng.random() < 0.5)),
    (BernoulliProbit(), lambda rng: int(rng.random() < 0.5)),
    (Gaussian(noise_variance=0.4), lambda rng: rng.normal(0.0, 1.0)),
]


def random_scalar_cases(rng, count):
    for _ in range(count):
        mu = rng.normal(0.0, 1.2)
        var = rng.uniform(0.05, 1.5)
        yield mu, var


# ---------------------------------------------------------------------------
# cavity
# ---------------------------------------------------------------------------


class TestComputeCavity:
    def test_alpha_zero_returns_marginal(self):
        post = GaussianMoments(np.array([0.7]), np.array([[0.9]]))
        site = Site(np.array([2.0]), np.array([[0.5]]), np.ones(1, bool))
        cav = compute_cavity(post, site, 0.0)
        np.testing.assert_allclose(cav.mu_cav, [0.7])
        np.testing.assert_allclose(cav.sigma_cav, [[0.9]])

    def test_no_site_returns_marginal(self):
        post = GaussianMoments(np.array([0.7]), np.array([[0.9]]))
        cav = compute_cavity(post, None, 1.0)
        np.testing.assert_allclose(cav.mu_cav, [0.7])

    def test_scalar_arithmetic(self):
        # post var 0.5, site var 1, alpha 1: cav prec = 2 - 1 = 1
        post = GaussianMoments(np.array([0.0]), np.array([[0.5]]))
        site = Site(np.array([0.0]), np.array([[1.0]]), np.ones(1, bool))
        cav = compute_cavity(post, site, 1.0)
        np.testing.assert_allclose(cav.sigma_cav, [[1.0]], atol=1e-12)

    def test_negative_variance_signals_failure(self):
        post = GaussianMoments(np.array([0.0]), np.array([[1.0]]))
        site = Site(np.array([0.0]), np.array([[0.5]]), np.ones(1, bool))
        assert compute_cavity(post, site, 1.0) is None

    def test_multivariate_discards_cross_covariances(self):
        post_cov = np.array([[0.5, 0.2], [0.2, 0.8]])
        post = GaussianMoments(np.array([0.1, -0.4]), post_cov)
        site = Site(
            np.array([1.0, 2.0]),
            np.array([[2.0, 0.9], [0.9, 4.0]]),
            np.ones(2, bool),
        )
        cav = compute_cavity(post, site, 1.0)
        assert cav.sigma_cav[0, 1] == 0.0  # diagonal by construction
        for i in range(2):
            prec = 1.0 / post_cov[i, i] - 1.0 / site.sigma_site[i, i]
            np.testing.assert_allclose(cav.sigma_cav[i, i], 1.0 / prec, rtol=1e-12)

    def test_inactive_dimension_passes_through(self):
        post = GaussianMoments(np.array([0.1, -0.4]), np.diag([0.5, 0.8]))
        site = Site(
            np.array([1.0, 0.0]),
            np.diag([2.0, 1.0]),
            np.array([True, False]),
        )
        cav = compute_cavity(post, site, 1.0)
        np.testing.assert_allclose(cav.sigma_cav[1, 1], 0.8, rtol=1e-12)
        np.testing.assert_allclose(cav.mu_cav[1], -0.4, rtol=1e-12)

    @given(
        post_var=st.floats(0.1, 2.0),
        site_var=st.floats(0.3, 5.0),
        alpha=st.floats(0.05, 1.0),
        post_mu=st.floats(-2.0, 2.0),
        site_mu=st.floats(-2.0, 2.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_reinclusion_recovers_marginal(
        self, post_var, site_var, alpha, post_mu, site_mu
    ):
        # removing then re-adding the alpha-fraction must round-trip
        post = GaussianMoments(np.array([post_mu]), np.array([[post_var]]))
        site = Site(np.array([site_mu]), np.array([[site_var]]), np.ones(1, bool))
        cav = compute_cavity(post, site, alpha)
        if cav is None:
            return  # legitimately non-PSD for this draw
        prec = 1.0 / cav.sigma_cav[0, 0] + alpha / site_var
        shift = cav.mu_cav[0] / cav.sigma_cav[0, 0] + alpha * site_mu / site_var
        np.testing.assert_allclose(prec, 1.0 / post_var, rtol=1e-10)
        np.testing.assert_allclose(shift / prec, post_mu, rtol=1e-8, atol=1e-10)


# ---------------------------------------------------------------------------
# power EP
# ---------------------------------------------------------------------------


class TestPepUpdate:
    @given(
        mu=st.floats(-2.0, 2.0),
        var=st.floats(0.05, 3.0),
        y=st.floats(-2.0, 2.0),
        noise=st.floats(0.05, 2.0),
        alpha=st.floats(0.01, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_gaussian_conjugate_fixed_point(self, mu, var, y, noise, alpha):
        site = pep_update(
            Cavity(np.array([mu]), np.array([[var]])),
            y,
            Gaussian(noise_variance=noise),
            alpha,
            GH20,
        )
        np.testing.assert_allclose(site.mu_site, [y], atol=1e-8)
        np.testing.assert_allclose(site.sigma_site, [[noise]], atol=1e-8)

    def test_bernoulli_logit_matches_dense_oracle(self):
        site = pep_update(
            Cavity(np.array([0.0]), np.array([[1.0]])), 1, BernoulliLogit(), 1.0, GH20
        )
        om, ov = pep_site_oracle(BernoulliLogit(), 1, 0.0, 1.0, 1.0)
        np.testing.assert_allclose(site.mu_site[0], om, atol=1e-5)
        np.testing.assert_allclose(site.sigma_site[0, 0], ov, atol=1e-5)

    def test_poisson_fractional_matches_dense_oracle(self):
        site = pep_update(
            Cavity(np.array([0.0]), np.array([[0.25]])), 2, Poisson(), 0.5, GH20
        )
        om, ov = pep_site_oracle(Poisson(), 2, 0.0, 0.25, 0.5)
        np.testing.assert_allclose(site.mu_site[0], om, atol=1e-5)
        np.testing.assert_allclose(site.sigma_site[0, 0], ov, atol=1e-5)

    @pytest.mark.parametrize("model_idx", range(len(SCALAR_MODELS)))
    def test_random_cases_match_dense_oracle(self, model_idx):
        model, sampler = SCALAR_MODELS[model_idx]
        rng = np.random.default_rng(100 + model_idx)
        checked = 0
        for mu, var in random_scalar_cases(rng, 12):
            y = sampler(rng)
            alpha = rng.uniform(0.2, 1.0)
            site = pep_update(
                Cavity(np.array([mu]), np.array([[var]])), y, model, alpha, GH50
            )
            om, ov = pep_site_oracle(model, y, mu, var, alpha)
            scale = max(1.0, abs(om), abs(ov))
            assert abs(site.mu_site[0] - om) / scale < 1e-5
            assert abs(site.sigma_site[0, 0] - ov) / scale < 1e-5
            checked += 1
        assert checked == 12

    @given(
        mu=st.floats(-1.0, 1.0),
        var=st.floats(0.1, 1.0),
        alpha=st.floats(0.1, 1.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_site_reproduces_tilted_posterior(self, mu, var, alpha):
        # cavity x alpha-fraction of site must equal the matched tilted moments
        model = Poisson()
        y = 1
        site = pep_update(Cavity(np.array([mu]), np.array([[var]])), y, model, alpha, GH50)
        if site is None:
            return
        f = np.linspace(mu - 10 * math.sqrt(var), mu + 10 * math.sqrt(var), 200_001)
        la = alpha * model.log_density(y, f[None, :]) - 0.5 * (
            (f - mu) ** 2 / var + math.log(2 * math.pi * var)
        )
        w = np.exp(la - la.max())
        z = np.trapezoid(w, f)
        mhat = np.trapezoid(w * f, f) / z
        chat = np.trapezoid(w * (f - mhat) ** 2, f) / z
        prec = 1.0 / var + alpha / site.sigma_site[0, 0]
        mean = (mu / var + alpha * site.mu_site[0] / site.sigma_site[0, 0]) / prec
        np.testing.assert_allclose(mean, mhat, rtol=2e-5, atol=2e-6)
        np.testing.assert_allclose(1.0 / prec, chat, rtol=2e-5, atol=2e-6)

    def test_heteroscedastic_two_latents_match_grid_oracle(self):
        model = HeteroscedasticGaussian()
        mu = np.array([0.2, 1.0])
        var = np.array([0.4, 0.3])
        y, alpha = 0.5, 0.7
        site = pep_update(Cavity(mu, np.diag(var)), y, model, alpha, gauss_hermite(2, 30))
        # dense tensor-grid tilted moments, then the diagonal-curvature algebra
        g1 = np.linspace(mu[0] - 9 * math.sqrt(var[0]), mu[0] + 9 * math.sqrt(var[0]), 1501)
        g2 = np.linspace(mu[1] - 9 * math.sqrt(var[1]), mu[1] + 9 * math.sqrt(var[1]), 1501)
        f1, f2 = np.meshgrid(g1, g2, indexing="ij")
        pts = np.stack([f1.ravel(), f2.ravel()])
        la = alpha * model.log_density(y, pts) - 0.5 * (
            (pts[0] - mu[0]) ** 2 / var[0] + (pts[1] - mu[1]) ** 2 / var[1]
        )
        w = np.exp(la - la.max()).reshape(f1.shape)
        z = np.trapezoid(np.trapezoid(w, g2, axis=1), g1)
        for i, grid in enumerate((f1, f2)):
            mhat = np.trapezoid(np.trapezoid(w * grid, g2, axis=1), g1) / z
            chat = (
                np.trapezoid(np.trapezoid(w * (grid - mhat) ** 2, g2, axis=1), g1) / z
            )
            grad = (mhat - mu[i]) / var[i]
            hess = (chat / var[i] - 1.0) / var[i]
            om = mu[i] - grad / hess
            ov = -alpha * (var[i] + 1.0 / hess)
            # the noise latent's weak tilt converges slowly in cubature
            # order; 5e-4 relative is what GH(30) genuinely delivers there
            scale = max(1.0, abs(om), abs(ov))
            assert abs(site.mu_site[i] - om) / scale < 5e-4, i
            assert abs(site.sigma_site[i, i] - ov) / scale < 5e-4, i
        assert site.sigma_site[0, 1] == 0.0

    def test_impossible_observation_skips(self):
        # Bernoulli y=1 with cavity far in the improbable tail still works,
        # but a non-finite tilt must signal a skip
        class Broken(Poisson):
            def _log_density(self, y, f):
                return np.full(f.shape[1], -np.inf)

        site = pep_update(
            Cavity(np.array([0.0]), np.array([[1.0]])), 1, Broken(), 1.0, GH20
        )
        assert site is None


# ---------------------------------------------------------------------------
# extended EP
# ---------------------------------------------------------------------------


class TestEepUpdate:
    @given(
        mu=st.floats(-2.0, 2.0),
        var=st.floats(0.05, 3.0),
        y=st.floats(-2.0, 2.0),
        noise=st.floats(0.05, 2.0),
        alpha=st.floats(0.0, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_gaussian_exact_any_alpha(self, mu, var, y, noise, alpha):
        site = eep_update(
            Cavity(np.array([mu]), np.array([[var]])),
            y,
            Gaussian(noise_variance=noise),
            alpha,
        )
        np.testing.assert_allclose(site.mu_site, [y], atol=1e-12)
        np.testing.assert_allclose(site.sigma_site, [[noise]], atol=1e-12)

    def test_poisson_small_variance_agrees_with_pep(self):
        # linearisation is accurate when the cavity is tight; sites are
        # compared through the posterior they induce on the shared cavity
        # (site coordinates themselves differ at first order in the variance)
        cav = Cavity(np.array([0.0]), np.array([[0.04]]))
        e = eep_update(cav, 1, Poisson(), 1.0)
        p = pep_update(cav, 1, Poisson(), 1.0, GH50)
        np.testing.assert_allclose(e.mu_site[0], p.mu_site[0], atol=5e-2)
        np.testing.assert_allclose(e.sigma_site[0, 0], p.sigma_site[0, 0], atol=5e-2)

        def include(site):
            prec = 1.0 / cav.sigma_cav[0, 0] + 1.0 / site.sigma_site[0, 0]
            mean = (
                cav.mu_cav[0] / cav.sigma_cav[0, 0]
                + site.mu_site[0] / site.sigma_site[0, 0]
            ) / prec
            return mean, 1.0 / prec

        me, ve = include(e)
        mp, vp = include(p)
        assert abs(me - mp) < 2e-3
        assert abs(ve - vp) < 2e-3

    def test_alpha_zero_is_defined(self):
        site = eep_update(Cavity(np.array([0.3]), np.array([[0.5]])), 1, Poisson(), 0.0)
        assert site is not None
        assert np.all(np.isfinite(site.mu_site))

    def test_heteroscedastic_noise_latent_inactive(self):
        model = HeteroscedasticGaussian()
        cav = Cavity(np.array([0.2, 1.0]), np.diag([0.5, 0.4]))
        site = eep_update(cav, 0.1, model, 1.0)
        assert site.active.tolist() == [True, False]
        # the signal latent gets the exact linearised observation: value y,
        # variance softplus(mu2 - shift)^2
        scale = math.log1p(math.exp(1.0 - model.shift))
        np.testing.assert_allclose(site.mu_site[0], 0.1, atol=1e-12)
        np.testing.assert_allclose(site.sigma_site[0, 0], scale**2, rtol=1e-8)

    def test_poisson_closed_form(self):
        # h = exp(f) + exp(f/2) s: at (mu, 0): h = e^mu, J_f = e^mu, J_s = e^(mu/2)
        mu, y, alpha = 0.4, 3, 0.6
        cav_var = 0.7
        site = eep_update(Cavity(np.array([mu]), np.array([[cav_var]])), y, Poisson(), alpha)
        jf = math.exp(mu) + 0.0
        r = math.exp(mu)  # (e^(mu/2))^2
        expect_var = r / jf**2
        v = y - math.exp(mu)
        s_obs = r + alpha * jf * cav_var * jf
        expect_mu = mu + (expect_var + alpha * cav_var) * jf * v / s_obs
        np.testing.assert_allclose(site.sigma_site[0, 0], expect_var, rtol=1e-10)
        np.testing.assert_allclose(site.mu_site[0], expect_mu, rtol=1e-10)


# ---------------------------------------------------------------------------
# statistically linearised EP
# ---------------------------------------------------------------------------


class TestSlepUpdate:
    @given(
        mu=st.floats(-2.0, 2.0),
        var=st.floats(0.05, 3.0),
        y=st.floats(-2.0, 2.0),
        noise=st.floats(0.05, 2.0),
        alpha=st.floats(0.0, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_gaussian_exact_any_alpha(self, mu, var, y, noise, alpha):
        site = slep_update(
            Cavity(np.array([mu]), np.array([[var]])),
            y,
            Gaussian(noise_variance=noise),
            alpha,
            ut5(1),
        )
        np.testing.assert_allclose(site.mu_site, [y], atol=1e-8)
        np.testing.assert_allclose(site.sigma_site, [[noise]], atol=1e-8)

    def test_probit_alpha_zero_matches_dense_slr_oracle(self):
        site = slep_update(
            Cavity(np.array([0.3]), np.array([[0.5]])), 1, BernoulliProbit(), 0.0, GH20
        )
        om, ov = slep_site_oracle(BernoulliProbit(), 1, 0.3, 0.5, 0.0)
        np.testing.assert_allclose(site.mu_site[0], om, atol=1e-5)
        np.testing.assert_allclose(site.sigma_site[0, 0], ov, atol=1e-5)

    @pytest.mark.parametrize("model_idx", range(len(SCALAR_MODELS)))
    def test_random_cases_match_dense_oracle(self, model_idx):
        model, sampler = SCALAR_MODELS[model_idx]
        rng = np.random.default_rng(300 + model_idx)
        for mu, var in random_scalar_cases(rng, 12):
            y = sampler(rng)
            alpha = rng.uniform(0.0, 1.0)
            site = slep_update(
                Cavity(np.array([mu]), np.array([[var]])), y, model, alpha, GH50
            )
            om, ov = slep_site_oracle(model, y, mu, var, alpha)
            if site is None:
                # oracle must agree the update was degenerate
                assert not (math.isfinite(om) and math.isfinite(ov)) or ov == 0
                continue
            scale = max(1.0, abs(om), abs(ov))
            assert abs(site.mu_site[0] - om) / scale < 1e-5
            assert abs(site.sigma_site[0, 0] - ov) / scale < 1e-5

    def test_heteroscedastic_noise_latent_inactive(self):
        # with a diagonal cavity the noise latent has zero cross-covariance
        # with the observation mean, so it receives no site factor
        model = HeteroscedasticGaussian()
        cav = Cavity(np.array([0.2, 1.0]), np.diag([0.5, 0.4]))
        site = slep_update(cav, 0.1, model, 1.0, gauss_hermite(2, 20))
        assert site.active.tolist() == [True, False]


# ---------------------------------------------------------------------------
# natural-gradient VI
# ---------------------------------------------------------------------------


class TestCviUpdate:
    @given(
        mu=st.floats(-2.0, 2.0),
        var=st.floats(0.05, 3.0),
        y=st.floats(-2.0, 2.0),
        noise=st.floats(0.05, 2.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_gaussian_exact_single_update(self, mu, var, y, noise):
        site = cvi_update(
            GaussianMoments(np.array([mu]), np.array([[var]])),
            y,
            Gaussian(noise_variance=noise),
            GH20,
            None,
            1.0,
        )
        np.testing.assert_allclose(site.mu_site, [y], atol=1e-7)
        np.testing.assert_allclose(site.sigma_site, [[noise]], atol=1e-7)

    def test_poisson_matches_dense_oracle(self):
        site = cvi_update(
            GaussianMoments(np.array([0.0]), np.array([[0.1]])),
            3,
            Poisson(),
            GH20,
            None,
            1.0,
        )
        om, ov = cvi_site_oracle(Poisson(), 3, 0.0, 0.1)
        np.testing.assert_allclose(site.mu_site[0], om, atol=1e-5)
        np.testing.assert_allclose(site.sigma_site[0, 0], ov, atol=1e-5)

    @pytest.mark.parametrize("model_idx", range(len(SCALAR_MODELS)))
    def test_random_cases_match_dense_oracle(self, model_idx):
        model, sampler = SCALAR_MODELS[model_idx]
        rng = np.random.default_rng(500 + model_idx)
        for mu, var in random_scalar_cases(rng, 12):
            y = sampler(rng)
            site = cvi_update(
                GaussianMoments(np.array([mu]), np.array([[var]])),
                y,
                model,
                GH50,
                None,
                1.0,
            )
            om, ov = cvi_site_oracle(model, y, mu, var)
            scale = max(1.0, abs(om), abs(ov))
            assert abs(site.mu_site[0] - om) / scale < 1e-5
            assert abs(site.sigma_site[0, 0] - ov) / scale < 1e-5

    def test_damping_blends_natural_parameters(self):
        # two half-steps from a zero site land at 75% of the undamped move
        post = GaussianMoments(np.array([0.2]), np.array([[0.6]]))
        model = Poisson()
        full = cvi_update(post, 2, model, GH20, None, 1.0)
        lam_full = site_natural_params(full, 1)
        zero = Site(np.zeros(1), np.eye(1), np.zeros(1, bool))
        once = cvi_update(post, 2, model, GH20, zero, 0.5)
        twice = cvi_update(post, 2, model, GH20, once, 0.5)
        np.testing.assert_allclose(
            site_natural_params(once, 1), 0.5 * lam_full, rtol=1e-10
        )
        np.testing.assert_allclose(
            site_natural_params(twice, 1), 0.75 * lam_full, rtol=1e-10
        )

    def test_non_concave_model_skips(self):
        # a convex log-likelihood has positive curvature: no Gaussian site
        class Convex(Gaussian):
            def _log_density(self, y, f):
                return 0.5 * (f[0] - y) ** 2

        site = cvi_update(
            GaussianMoments(np.array([0.0]), np.array([[1.0]])),
            0.0,
            Convex(),
            GH20,
            None,
            1.0,
        )
        assert site is None


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


class TestRuleConfig:
    def test_valid_configurations(self):
        RuleConfig("pep", alpha=0.5, cubature="gh")
        RuleConfig("eep", alpha=0.0, cubature="none")
        RuleConfig("slep", alpha=1.0, cubature="ut5")
        RuleConfig("cvi", damping=0.5)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(rule="ep"),
            dict(rule="pep", alpha=0.0),
            dict(rule="pep", alpha=1.5),
            dict(rule="pep", cubature="none"),
            dict(rule="eep", alpha=-0.1),
            dict(rule="slep", alpha=1.2),
            dict(rule="slep", cubature="none"),
            dict(rule="cvi", damping=0.0),
            dict(rule="cvi", damping=1.0001),
        ],
    )
    def test_invalid_configurations_rejected(self, kwargs):
        with pytest.raises(ValueError):
            RuleConfig(**kwargs)


class TestSiteHelpers:
    def test_observation_extracts_active_block(self):
        site = Site(
            np.array([1.0, 9.0, 2.0]),
            np.diag([0.5, 7.0, 0.25]),
            np.array([True, False, True]),
        )
        idx, val, noise = site.observation()
        np.testing.assert_array_equal(idx, [0, 2])
        np.testing.assert_allclose(val, [1.0, 2.0])
        np.testing.assert_allclose(noise, np.diag([0.5, 0.25]))

    def test_natural_params_of_absent_site_are_zero(self):
        np.testing.assert_array_equal(site_natural_params(None, 2), np.zeros(4))

    def test_natural_params_roundtrip(self):
        site = Site(np.array([2.0]), np.array([[0.5]]), np.ones(1, bool))
        lam = site_natural_params(site, 1)
        np.testing.assert_allclose(lam, [4.0, 2.0])
