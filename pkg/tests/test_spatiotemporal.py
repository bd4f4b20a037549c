"""Separable space-time model tests against dense batch-GP oracles."""

import math

import numpy as np
import pytest

import markovgp.kernels as K
from markovgp.engine import RuleConfig, TemporalGP, run_inference
from markovgp.likelihoods import BernoulliProbit, Gaussian, Poisson
from markovgp.spatiotemporal import (
    SpatialConfig,
    build_sequence,
    build_state,
    compile_st_dynamics,
    fit_spatiotemporal,
    measurement_matrix,
    order_by_time,
    quantile_inducing_points,
    run_spatiotemporal,
    spatial_gram,
    spatiotemporal_nlpd,
)


def dense_separable_posterior(kern_r, kern_t, r, t, y, noise_var):
    """Batch GP with product kernel on scattered (r, t) points."""
    n = t.size
    dist_r = np.abs(r[:, None] - r[None, :])
    dist_t = np.abs(t[:, None] - t[None, :])
    gram = K.kappa(kern_r, dist_r) * K.kappa(kern_t, dist_t)
    kn = gram + noise_var * np.eye(n)
    alpha = np.linalg.solve(kn, y)
    mean = gram @ alpha
    cov = gram - gram @ np.linalg.solve(kn, gram)
    sign, logdet = np.linalg.slogdet(2.0 * math.pi * kn)
    return mean, np.diag(cov), 0.5 * (logdet + y @ alpha)


def point_marginals(model, result, step_of_point, r):
    means, variances = [], []
    for i in range(step_of_point.size):
        h = measurement_matrix(model, r[i])
        k = int(step_of_point[i])
        means.append(float((h @ result.state_means[k])[0]))
        variances.append(float((h @ result.state_covs[k] @ h.T)[0, 0]))
    return np.array(means), np.array(variances)


class TestSpatialConfig:
    def test_rejects_duplicate_locations(self):
        with pytest.raises(ValueError, match="distinct"):
            SpatialConfig(K.Matern32(variance=1.0, lengthscale=1.0), np.array([0.5, 0.5]))

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            SpatialConfig(
                K.Matern32(variance=1.0, lengthscale=1.0), np.array([0.0]), mode="other"
            )

    def test_quantile_points_are_sorted_and_inside_range(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=500)
        pts = quantile_inducing_points(r, 15)
        assert pts.size == 15
        assert np.all(np.diff(pts) > 0)
        assert pts.min() >= r.min() and pts.max() <= r.max()


class TestMeasurementMatrix:
    def set_of_model(self, mode="inducing"):
        spatial = SpatialConfig(
            K.Matern52(variance=1.0, lengthscale=1.0),
            np.array([0.0, 1.0, 2.5]),
            mode=mode,
        )
        return build_state(spatial, K.Matern32(variance=1.0, lengthscale=1.0))

    def test_at_inducing_point_row_is_unit_basis(self):
        model = self.set_of_model()
        for j, node in enumerate([0.0, 1.0, 2.5]):
            h = measurement_matrix(model, node)
            row = np.zeros(3)
            row[j] = 1.0
            expected = np.kron(row[None, :], model.ssm_t.H)
            np.testing.assert_allclose(h, expected, atol=1e-7)

    def test_far_point_has_negligible_weight(self):
        model = self.set_of_model()
        h = measurement_matrix(model, 80.0)
        assert np.linalg.norm(h) < 1e-6

    def test_midpoint_matches_dense_conditional_mean(self):
        model = self.set_of_model()
        r_star = 0.5
        cross = spatial_gram(model.spatial.kernel, [r_star], model.spatial.inducing)[0]
        weights = np.linalg.inv(model.k_uu) @ cross
        expected = np.kron(weights[None, :], model.ssm_t.H)
        np.testing.assert_allclose(measurement_matrix(model, r_star), expected, atol=1e-10)

    def test_grid_mode_uses_unit_rows(self):
        model = self.set_of_model(mode="grid")
        h = measurement_matrix(model, 1.0)
        row = np.zeros(3)
        row[1] = 1.0
        np.testing.assert_allclose(h, np.kron(row[None, :], model.ssm_t.H), atol=0.0)


class TestOrderByTime:
    def test_sorted_input_is_identity(self):
        t = np.array([0.0, 1.0, 2.0])
        unique_t, groups = order_by_time(t)
        np.testing.assert_allclose(unique_t, t)
        for k, g in enumerate(groups):
            np.testing.assert_array_equal(g, [k])

    def test_duplicates_group_into_one_step(self):
        t = np.array([1.0, 0.0, 1.0])
        unique_t, groups = order_by_time(t)
        np.testing.assert_allclose(unique_t, [0.0, 1.0])
        np.testing.assert_array_equal(groups[0], [1])
        np.testing.assert_array_equal(sorted(groups[1]), [0, 2])

    def test_block_step_has_one_unit_per_point(self):
        spatial = SpatialConfig(
            K.Matern32(variance=1.0, lengthscale=1.0), np.array([0.0, 1.0])
        )
        model = build_state(spatial, K.Matern12(variance=1.0, lengthscale=1.0))
        t = np.array([0.0, 0.5, 0.5])
        r = np.array([0.2, 0.1, 0.9])
        y = np.array([0.3, -0.1, 0.7])
        seq, step_of_point, _ = build_sequence(model, r, t, y, Gaussian())
        assert seq.grid.num_steps == 2
        assert seq.H[1].shape == (2, model.state_dim)
        assert len(seq.units[1]) == 2
        np.testing.assert_array_equal(step_of_point, [0, 1, 1])


class TestSeparableExactness:
    def test_single_node_reduces_to_scaled_temporal_model(self):
        rng = np.random.default_rng(1)
        temporal = K.Matern32(variance=0.8, lengthscale=1.1)
        spatial = SpatialConfig(
            K.Matern52(variance=2.0, lengthscale=1.3), np.array([0.7])
        )
        model = build_state(spatial, temporal)
        n = 60
        t = np.sort(rng.uniform(0.0, 8.0, n))
        y = rng.normal(size=n)
        r = np.full(n, 0.7)
        res, step_of_point = run_spatiotemporal(
            model, Gaussian(noise_variance=0.3), r, t, y, RuleConfig("pep"), num_iters=3
        )
        scaled = K.Matern32(variance=0.8 * 2.0, lengthscale=1.1)
        ref = run_inference(
            TemporalGP((scaled,), Gaussian(noise_variance=0.3)),
            t,
            y,
            RuleConfig("pep"),
            num_iters=3,
        )
        got_mean, got_var = point_marginals(model, res, step_of_point, r)
        ref_mean = np.array([m[0] for m in ref.latent_means])
        ref_var = np.array([c[0, 0] for c in ref.latent_covs])
        np.testing.assert_allclose(got_mean, ref_mean, atol=1e-7)
        np.testing.assert_allclose(got_var, ref_var, atol=1e-7)

    @pytest.mark.parametrize("mode", ["grid", "inducing"])
    def test_full_grid_matches_dense_product_kernel_gp(self, mode):
        rng = np.random.default_rng(2)
        nodes = np.array([0.0, 0.8, 2.0])
        kern_r = K.Matern52(variance=1.0, lengthscale=1.2)
        kern_t = K.Matern32(variance=1.4, lengthscale=0.9)
        spatial = SpatialConfig(kern_r, nodes, mode=mode)
        model = build_state(spatial, kern_t)
        n_t = 40
        times = np.sort(rng.uniform(0.0, 10.0, n_t))
        t = np.repeat(times, nodes.size)
        r = np.tile(nodes, n_t)
        y = rng.normal(size=t.size)
        noise = 0.3
        res, step_of_point = run_spatiotemporal(
            model, Gaussian(noise_variance=noise), r, t, y, RuleConfig("pep"), num_iters=3
        )
        mean_or, var_or, evidence = dense_separable_posterior(
            kern_r, kern_t, r, t, y, noise
        )
        got_mean, got_var = point_marginals(model, res, step_of_point, r)
        np.testing.assert_allclose(got_mean, mean_or, atol=1e-6)
        np.testing.assert_allclose(got_var, var_or, atol=1e-6)
        np.testing.assert_allclose(res.energy.total, evidence, rtol=1e-7)

    def test_grid_mode_h_is_identity_kron_temporal(self):
        nodes = np.array([0.0, 1.0, 2.0])
        spatial = SpatialConfig(
            K.Matern32(variance=1.0, lengthscale=1.0), nodes, mode="grid"
        )
        model = build_state(spatial, K.Matern52(variance=1.0, lengthscale=1.0))
        t = np.zeros(3)
        r = nodes.copy()
        y = np.ones(3)
        seq, _, _ = build_sequence(model, r, t, y, Gaussian())
        np.testing.assert_allclose(
            seq.H[0], np.kron(np.eye(3), model.ssm_t.H), atol=0.0
        )

    def test_many_nodes_per_step_fall_back_to_marginal_energy(self):
        # five co-located points exceed the joint-cubature dimension cap:
        # the posterior must stay exact and the energy finite
        rng = np.random.default_rng(3)
        nodes = np.linspace(0.0, 4.0, 5)
        kern_r = K.Matern52(variance=1.0, lengthscale=1.5)
        kern_t = K.Matern32(variance=1.0, lengthscale=1.0)
        model = build_state(SpatialConfig(kern_r, nodes, mode="grid"), kern_t)
        n_t = 12
        times = np.sort(rng.uniform(0.0, 6.0, n_t))
        t = np.repeat(times, nodes.size)
        r = np.tile(nodes, n_t)
        y = rng.normal(size=t.size)
        noise = 0.4
        res, step_of_point = run_spatiotemporal(
            model, Gaussian(noise_variance=noise), r, t, y, RuleConfig("pep"), num_iters=3
        )
        mean_or, var_or, _ = dense_separable_posterior(kern_r, kern_t, r, t, y, noise)
        got_mean, got_var = point_marginals(model, res, step_of_point, r)
        np.testing.assert_allclose(got_mean, mean_or, atol=1e-6)
        np.testing.assert_allclose(got_var, var_or, atol=1e-6)
        assert np.isfinite(res.energy.total)


class TestKroneckerSymmetries:
    def make_data(self, rng, n=80):
        t = np.sort(rng.uniform(0.0, 6.0, n))
        r = rng.uniform(-2.0, 2.0, n)
        f = np.sin(t) * np.exp(-0.2 * np.abs(r))
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-2.0 * f))).astype(float)
        return r, t, y

    def test_permuting_inducing_labels_changes_nothing(self):
        rng = np.random.default_rng(4)
        r, t, y = self.make_data(rng)
        nodes = np.linspace(-2.0, 2.0, 5)
        kern_r = K.Matern52(variance=1.0, lengthscale=1.0)
        kern_t = K.Matern32(variance=1.0, lengthscale=1.5)
        lik = BernoulliProbit()
        cfg = RuleConfig("pep", alpha=0.5)
        perm = np.array([3, 0, 4, 1, 2])
        res_a, sop = run_spatiotemporal(
            build_state(SpatialConfig(kern_r, nodes), kern_t), lik, r, t, y, cfg, 5
        )
        model_a = build_state(SpatialConfig(kern_r, nodes), kern_t)
        model_b = build_state(SpatialConfig(kern_r, nodes[perm]), kern_t)
        res_b, _ = run_spatiotemporal(model_b, lik, r, t, y, cfg, 5)
        mean_a, var_a = point_marginals(model_a, res_a, sop, r)
        mean_b, var_b = point_marginals(model_b, res_b, sop, r)
        np.testing.assert_allclose(mean_a, mean_b, atol=1e-10)
        np.testing.assert_allclose(var_a, var_b, atol=1e-10)

    def test_grid_mode_on_node_data_matches_inducing_mode(self):
        rng = np.random.default_rng(5)
        nodes = np.linspace(-1.5, 1.5, 4)
        n = 70
        t = np.sort(rng.uniform(0.0, 5.0, n))
        r = nodes[rng.integers(0, nodes.size, n)]
        y = rng.poisson(1.5, size=n).astype(float)
        kern_r = K.Matern32(variance=1.0, lengthscale=1.0)
        kern_t = K.Matern52(variance=0.8, lengthscale=1.0)
        lik = Poisson()
        cfg = RuleConfig("pep")
        model_g = build_state(SpatialConfig(kern_r, nodes, mode="grid"), kern_t)
        model_i = build_state(SpatialConfig(kern_r, nodes, mode="inducing"), kern_t)
        res_g, sop = run_spatiotemporal(model_g, lik, r, t, y, cfg, 6)
        res_i, _ = run_spatiotemporal(model_i, lik, r, t, y, cfg, 6)
        mean_g, var_g = point_marginals(model_g, res_g, sop, r)
        mean_i, var_i = point_marginals(model_i, res_i, sop, r)
        np.testing.assert_allclose(mean_g, mean_i, atol=1e-8)
        np.testing.assert_allclose(var_g, var_i, atol=1e-8)


class TestSpatioTemporalLearning:
    def test_fit_decreases_energy_and_moves_lengthscale(self):
        rng = np.random.default_rng(6)
        n = 90
        t = np.sort(rng.uniform(0.0, 6.0, n))
        r = rng.uniform(-2.0, 2.0, n)
        f = 1.5 * np.sin(1.2 * t) * np.exp(-0.3 * r * r)
        y = f + 0.4 * rng.normal(size=n)
        nodes = quantile_inducing_points(r, 5)
        model = build_state(
            SpatialConfig(K.Matern52(variance=1.0, lengthscale=2.5), nodes),
            K.Matern32(variance=0.5, lengthscale=2.5),
        )
        lik = Gaussian(noise_variance=0.16)
        fitted, hist = fit_spatiotemporal(
            model, lik, r, t, y, RuleConfig("pep"), num_iters=30, step_size=0.1
        )
        assert hist.energies[-1] < hist.energies[0]
        assert fitted.theta.shape == model.theta.shape
        assert not np.allclose(fitted.theta, model.theta)

    def test_nlpd_on_held_out_points(self):
        rng = np.random.default_rng(7)
        n = 100
        t = np.sort(rng.uniform(0.0, 6.0, n))
        r = rng.uniform(-2.0, 2.0, n)
        f = np.cos(t) * np.exp(-0.2 * r * r)
        y = f + 0.3 * rng.normal(size=n)
        test = np.zeros(n, bool)
        test[rng.choice(n, 20, replace=False)] = True
        nodes = quantile_inducing_points(r, 6)
        model = build_state(
            SpatialConfig(K.Matern52(variance=1.0, lengthscale=1.0), nodes),
            K.Matern32(variance=1.0, lengthscale=1.0),
        )
        lik = Gaussian(noise_variance=0.09)
        res, sop = run_spatiotemporal(
            model, lik, r, t, y, RuleConfig("pep"), num_iters=5, mask=~test
        )
        nlpd = spatiotemporal_nlpd(model, lik, res, sop, r, y, test)
        assert np.isfinite(nlpd)
        # the fit should beat a trivial standard-normal predictive
        base = float(
            np.mean(0.5 * (np.log(2 * math.pi * np.var(y)) + (y[test] - y.mean()) ** 2 / np.var(y)))
        )
        assert nlpd < base
