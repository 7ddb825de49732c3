"""Fusion, KL, and sampling tests against independent closed-form oracles."""

import math

import numpy as np
import pytest

from gpoe import autodiff as ad
from gpoe.exceptions import ContractError, DomainError
from gpoe.gaussians import (
    DiagonalGaussian,
    FusionWeights,
    density_curve,
    gpoe_fuse,
    kl_std_normal,
    log_density,
    moe_component_sample,
    poe_fuse,
    sample_reparam,
)


def gaussian(mean, var):
    return DiagonalGaussian.from_variance(np.atleast_1d(mean), np.atleast_1d(var))


def moments(g):
    return g.mean.value, np.exp(g.log_var.value)


def oracle_poe(means, variances):
    """Precision-weighted fusion computed directly in numpy."""
    prec = 1.0 / variances
    total = prec.sum(axis=0)
    return (means * prec).sum(axis=0) / total, 1.0 / total


def oracle_gpoe(means, variances, alphas):
    wprec = alphas / variances
    total = wprec.sum(axis=0)
    return (means * wprec).sum(axis=0) / total, 1.0 / total


class TestProductFusion:
    def test_symmetric_experts_halve_variance(self):
        mean, var = moments(poe_fuse([gaussian(0, 1), gaussian(0, 1)]))
        np.testing.assert_allclose(mean, [0.0], atol=1e-15)
        np.testing.assert_allclose(var, [0.5], rtol=1e-14)

    def test_single_expert_identity(self):
        mean, var = moments(poe_fuse([gaussian(2, 3)]))
        np.testing.assert_allclose(mean, [2.0], rtol=1e-14)
        np.testing.assert_allclose(var, [3.0], rtol=1e-14)

    def test_hand_evaluated_pair(self):
        mean, var = moments(poe_fuse([gaussian(1, 1), gaussian(3, 0.5)]))
        np.testing.assert_allclose(mean, [7.0 / 3.0], rtol=1e-14)
        np.testing.assert_allclose(var, [1.0 / 3.0], rtol=1e-14)

    def test_against_oracle_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            m = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 17))
            means = rng.normal(0, 3, size=(m, dim))
            variances = rng.uniform(0.05, 5.0, size=(m, dim))
            experts = [
                DiagonalGaussian.from_variance(means[i], variances[i])
                for i in range(m)
            ]
            mean, var = moments(poe_fuse(experts))
            want_mean, want_var = oracle_poe(means, variances)
            np.testing.assert_allclose(mean, want_mean, rtol=1e-10)
            np.testing.assert_allclose(var, want_var, rtol=1e-10)

    def test_empty_expert_list_rejected(self):
        with pytest.raises(ContractError):
            poe_fuse([])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractError):
            poe_fuse([gaussian([0, 0], [1, 1]), gaussian(0, 1)])

    def test_non_positive_variance_rejected(self):
        with pytest.raises(DomainError):
            gaussian(0, 0.0)
        with pytest.raises(DomainError):
            gaussian(0, -1.0)

    def test_variance_floor_engages(self):
        experts = [gaussian(0, 1e-12), gaussian(0, 1e-12)]
        _, var = moments(poe_fuse(experts))
        np.testing.assert_allclose(var, [1e-8])
        _, var = moments(poe_fuse(experts, variance_floor=None))
        np.testing.assert_allclose(var, [5e-13], rtol=1e-12)


class TestWeightedProductFusion:
    def test_one_hot_selects_expert(self):
        a, b = gaussian(1.25, 0.7), gaussian(-3, 2.2)
        mean, var = moments(gpoe_fuse([a, b], FusionWeights([[1.0], [0.0]])))
        np.testing.assert_allclose(mean, [1.25], rtol=1e-12)
        np.testing.assert_allclose(var, [0.7], rtol=1e-12)

    def test_uniform_weights_on_identical_experts(self):
        a = gaussian(0.5, 1.3)
        mean, var = moments(
            gpoe_fuse([a, gaussian(0.5, 1.3)], FusionWeights([[0.5], [0.5]]))
        )
        np.testing.assert_allclose(mean, [0.5], rtol=1e-12)
        np.testing.assert_allclose(var, [1.3], rtol=1e-12)

    def test_hand_evaluated_pair(self):
        mean, var = moments(
            gpoe_fuse(
                [gaussian(1, 1), gaussian(3, 1)], FusionWeights([[0.75], [0.25]])
            )
        )
        np.testing.assert_allclose(mean, [1.5], rtol=1e-12)
        np.testing.assert_allclose(var, [1.0], rtol=1e-12)

    def test_against_oracle_random(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            m = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 17))
            means = rng.normal(0, 3, size=(m, dim))
            variances = rng.uniform(0.05, 5.0, size=(m, dim))
            raw = rng.uniform(0.1, 1.0, size=(m, dim))
            alphas = raw / raw.sum(axis=0, keepdims=True)
            experts = [
                DiagonalGaussian.from_variance(means[i], variances[i])
                for i in range(m)
            ]
            mean, var = moments(gpoe_fuse(experts, FusionWeights(alphas)))
            want_mean, want_var = oracle_gpoe(means, variances, alphas)
            np.testing.assert_allclose(mean, want_mean, rtol=1e-10)
            np.testing.assert_allclose(var, want_var, rtol=1e-10)

    def test_uniform_alpha_matches_product_up_to_count_factor(self):
        rng = np.random.default_rng(13)
        for m in (2, 3, 5):
            means = rng.normal(0, 2, size=(m, 4))
            variances = rng.uniform(0.1, 4.0, size=(m, 4))
            experts = [
                DiagonalGaussian.from_variance(means[i], variances[i])
                for i in range(m)
            ]
            poe_mean, poe_var = moments(poe_fuse(experts))
            g_mean, g_var = moments(
                gpoe_fuse(experts, FusionWeights(np.full((m, 4), 1.0 / m)))
            )
            np.testing.assert_allclose(g_mean, poe_mean, rtol=1e-12)
            np.testing.assert_allclose(g_var, m * poe_var, rtol=1e-12)

    def test_expert_splitting_invariance(self):
        p = gaussian([0.7, -1.2], [0.9, 2.0])
        q = gaussian([0.1, 0.4], [1.5, 0.3])
        whole = gpoe_fuse([p, q], FusionWeights([[0.6, 0.3], [0.4, 0.7]]))
        split = gpoe_fuse(
            [p, p, q],
            FusionWeights([[0.3, 0.15], [0.3, 0.15], [0.4, 0.7]]),
        )
        np.testing.assert_array_equal(whole.mean.value, split.mean.value)
        np.testing.assert_array_equal(
            np.exp(whole.log_var.value), np.exp(split.log_var.value)
        )

    def test_fused_variance_bounded_by_expert_range(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            m = int(rng.integers(2, 5))
            variances = rng.uniform(0.05, 5.0, size=(m, 6))
            raw = rng.uniform(0.05, 1.0, size=(m, 6))
            alphas = raw / raw.sum(axis=0, keepdims=True)
            experts = [
                DiagonalGaussian.from_variance(np.zeros(6), variances[i])
                for i in range(m)
            ]
            _, var = moments(gpoe_fuse(experts, FusionWeights(alphas)))
            assert np.all(var >= variances.min(axis=0) * (1 - 1e-12))
            assert np.all(var <= variances.max(axis=0) * (1 + 1e-12))

    def test_weight_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            gpoe_fuse([gaussian(0, 1)], FusionWeights([[0.5], [0.5]]))

    def test_denormalized_weights_rejected(self):
        with pytest.raises(ContractError, match="sum to 1"):
            FusionWeights([[0.5], [0.4]])
        with pytest.raises(ContractError, match="\\[0, 1\\]"):
            FusionWeights([[1.5], [-0.5]])


class TestGradientsThroughFusion:
    def test_gpoe_gradients_wrt_means_and_variances(self):
        rng = np.random.default_rng(23)
        m, dim = 3, 2
        alphas = FusionWeights(np.full((m, dim), 1.0 / m))
        probe = rng.standard_normal(2 * dim)

        def f(theta):
            means = ad.reshape(
                ad.matmul(ad.reshape(theta, (1, 2 * m * dim)), sel_means), (m, dim)
            )
            variances = ad.exp(
                ad.reshape(
                    ad.matmul(ad.reshape(theta, (1, 2 * m * dim)), sel_vars),
                    (m, dim),
                )
            )
            experts = [
                DiagonalGaussian.from_variance(
                    ad.matmul(one_hot(i, m), means).reshape((dim,)),
                    ad.matmul(one_hot(i, m), variances).reshape((dim,)),
                )
                for i in range(m)
            ]
            fused = gpoe_fuse(experts, alphas)
            out = ad.concat([fused.mean, ad.exp(fused.log_var)], axis=0)
            return (out * probe).sum()

        def one_hot(i, m):
            row = np.zeros((1, m))
            row[0, i] = 1.0
            return ad.Tensor(row)

        sel_means = np.zeros((2 * m * dim, m * dim))
        sel_means[np.arange(m * dim), np.arange(m * dim)] = 1.0
        sel_vars = np.zeros((2 * m * dim, m * dim))
        sel_vars[m * dim + np.arange(m * dim), np.arange(m * dim)] = 1.0

        theta = rng.uniform(-0.5, 0.5, size=2 * m * dim)
        assert ad.finite_difference_check(f, theta, step=1e-6) <= 1e-4

    def test_gpoe_gradients_wrt_weights(self):
        rng = np.random.default_rng(29)
        experts = [gaussian([0.5, -1.0], [0.8, 1.2]), gaussian([2.0, 0.3], [0.4, 2.5])]
        probe = rng.standard_normal(4)
        base = np.array([[0.3, 0.7], [0.7, 0.3]])

        def f(alpha_leaf):
            fused = gpoe_fuse(
                experts, FusionWeights(ad.reshape(alpha_leaf, (2, 2)))
            )
            out = ad.concat([fused.mean, ad.exp(fused.log_var)], axis=0)
            return (out * probe).sum()

        # Small step keeps perturbed weights within the normalization tolerance.
        assert ad.finite_difference_check(f, base.ravel(), step=1e-7) <= 1e-4


class TestKLToPrior:
    def test_prior_has_zero_divergence(self):
        assert kl_std_normal(gaussian(0, 1)).item() == pytest.approx(0.0, abs=1e-15)

    def test_unit_shift(self):
        assert kl_std_normal(gaussian(1, 1)).item() == pytest.approx(0.5, rel=1e-12)

    def test_e_variance(self):
        want = 0.5 * math.e - 1.0
        assert kl_std_normal(gaussian(0, math.e)).item() == pytest.approx(
            want, rel=1e-12
        )

    def test_non_negative_and_zero_only_at_prior(self):
        rng = np.random.default_rng(31)
        for _ in range(2000):
            dim = int(rng.integers(1, 8))
            g = DiagonalGaussian.from_variance(
                rng.normal(0, 2, dim), rng.uniform(0.05, 5.0, dim)
            )
            kl = kl_std_normal(g).item()
            assert kl >= 0.0
            if kl < 1e-12:
                np.testing.assert_allclose(g.mean.value, 0.0, atol=1e-6)
                np.testing.assert_allclose(np.exp(g.log_var.value), 1.0, atol=1e-6)

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(37)
        n = 1_000_000
        for _ in range(3):
            dim = int(rng.integers(1, 4))
            mu = rng.normal(0, 1.5, dim)
            var = rng.uniform(0.2, 3.0, dim)
            g = DiagonalGaussian.from_variance(mu, var)
            z = mu + np.sqrt(var) * rng.standard_normal((n, dim))
            log_q = (
                -0.5 * ((z - mu) ** 2 / var + np.log(var) + math.log(2 * math.pi))
            ).sum(axis=1)
            log_p = (-0.5 * (z**2 + math.log(2 * math.pi))).sum(axis=1)
            samples = log_q - log_p
            se = samples.std() / math.sqrt(n)
            assert abs(kl_std_normal(g).item() - samples.mean()) <= 3 * se

    def test_batched_rows_reduce_per_row(self):
        g = DiagonalGaussian.from_variance(
            np.array([[0.0, 0.0], [1.0, 0.0]]), np.ones((2, 2))
        )
        np.testing.assert_allclose(kl_std_normal(g).value, [0.0, 0.5], atol=1e-15)


class TestReparamSampling:
    def test_zero_noise_returns_mean(self):
        g = gaussian([0.3, -2.0], [1.7, 0.2])
        z = sample_reparam(g, np.zeros(2))
        np.testing.assert_array_equal(z.value, g.mean.value)

    def test_unit_noise_scales_by_sigma(self):
        z = sample_reparam(gaussian(0, 4), np.array([1.0]))
        np.testing.assert_allclose(z.value, [2.0], rtol=1e-14)

    def test_monte_carlo_mean_concentration(self):
        rng = np.random.default_rng(41)
        n = 100_000
        eps = rng.standard_normal((n, 1))
        z = sample_reparam(
            DiagonalGaussian.from_variance(np.ones((n, 1)), np.full((n, 1), 0.25)),
            eps,
        )
        assert abs(z.value.mean() - 1.0) <= 3 * 0.5 / math.sqrt(n)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractError):
            sample_reparam(gaussian([0, 0], [1, 1]), np.zeros(3))

    def test_gradients_flow(self):
        def f(theta):
            g = DiagonalGaussian.from_variance(
                theta * np.array([1.0, 0.0]) + np.array([0.0, 0.0]),
                ad.exp(theta * np.array([0.0, 1.0])) + np.array([0.1, 0.0]),
            )
            return sample_reparam(g, np.array([0.7, -0.3])).sum()

        assert ad.finite_difference_check(f, np.array([0.4, 0.2]), 1e-6) <= 1e-4


class TestMixtureComponentSampling:
    def test_single_expert_index_zero(self):
        rng = np.random.default_rng(43)
        for _ in range(20):
            _, index = moe_component_sample([gaussian(0, 1)], rng)
            assert index == 0

    def test_component_frequency(self):
        rng = np.random.default_rng(47)
        experts = [gaussian(0, 1), gaussian(5, 1)]
        draws = 100_000
        zeros = sum(
            moe_component_sample(experts, rng)[1] == 0 for _ in range(draws)
        )
        assert abs(zeros / draws - 0.5) <= 0.01

    def test_seeded_determinism(self):
        experts = [gaussian(0, 1), gaussian(5, 2)]
        z1, i1 = moe_component_sample(experts, np.random.default_rng(99))
        z2, i2 = moe_component_sample(experts, np.random.default_rng(99))
        assert i1 == i2
        np.testing.assert_array_equal(z1.value, z2.value)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            moe_component_sample([], np.random.default_rng(0))


class TestDensityCurve:
    def test_standard_normal_peak(self):
        value = density_curve(gaussian(0, 1), [0.0])[0]
        assert value == pytest.approx(1.0 / math.sqrt(2 * math.pi), rel=1e-12)

    def test_symmetry(self):
        g = gaussian(0, 2.3)
        x = np.linspace(0.1, 3.0, 17)
        np.testing.assert_allclose(
            density_curve(g, x), density_curve(g, -x), rtol=1e-14
        )

    def test_weight_asymmetry_moves_peak_between_modes(self):
        # Two 1-d experts; weighting expert 2 harder pulls the fused peak
        # toward expert 2's mean, and vice versa.
        g1, g2 = gaussian(-1.5, 0.4), gaussian(1.5, 0.6)
        x = np.linspace(-4, 4, 2001)
        favor_1 = density_curve(
            gpoe_fuse([g1, g2], FusionWeights([[0.75], [0.25]])), x
        )
        favor_2 = density_curve(
            gpoe_fuse([g1, g2], FusionWeights([[0.25], [0.75]])), x
        )
        peak_favor_1 = x[np.argmax(favor_1)]
        peak_favor_2 = x[np.argmax(favor_2)]
        assert abs(peak_favor_2 - 1.5) < abs(peak_favor_1 - 1.5)
        assert abs(peak_favor_1 - (-1.5)) < abs(peak_favor_2 - (-1.5))

    def test_multidimensional_rejected(self):
        with pytest.raises(ContractError):
            density_curve(gaussian([0, 0], [1, 1]), [0.0])


class TestLogDensity:
    def test_matches_density_curve_in_1d(self):
        g = gaussian(0.3, 1.7)
        x = np.array([0.9])
        want = math.log(density_curve(g, x)[0])
        assert log_density(g, x).item() == pytest.approx(want, rel=1e-12)
