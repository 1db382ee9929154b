# tests/test_mglmm.py - Logit-normal MGLMM: design, joint density, quadrature and importance sampling
import numpy as np
import pytest
from scipy.special import expit

from src.config import get_config
from src.errors import ConfigurationError, ContractError
from src.models.importance import (ApproxConfig, adaptive_quadrature_loglik, build_proposal,
                                   full_loglik_mglmm, laplace_mode, mglmm_score, mglmm_value_and_score,
                                   mode_sensitivities)
from src.models.mglmm import (MglmmDataset, MglmmDesign, bernoulli_expected_ratio, bernoulli_split_bound,
                              generate_design, joint_gradient, joint_hessian, joint_logdensity,
                              joint_theta_gradient, normal_expected_ratio, simulate_mglmm,
                              subcoll_ratio_bernoulli, subcoll_ratio_normal)
from src.models.params import MglmmParams
from src.models.quadrature import bernoulli_kl, logistic_normal_mean, marginal_success_prob


def central_difference(func, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    out = []
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = h
        out.append((func(x + step) - func(x - step)) / (2 * h))
    return np.array(out)


@pytest.fixture
def single_cell_data():
    """N = 1, p = 1 dataset for the quadrature oracle"""
    theta = MglmmParams([0.4], [-0.3], 0.8)
    design = MglmmDesign(N=1, p=1, x=np.array([[[0.6]]]))
    return theta, simulate_mglmm(theta, design, seed=21)


# =============================================================================
# UNIT TESTS
# =============================================================================


class TestDesign:
    """Predictor generation and validation"""

    def test_norms_and_floor(self):
        design = generate_design(6, 2, seed=1, gram_floor=0.1)
        assert np.all(np.linalg.norm(design.x, axis=-1) <= 1.0)
        assert design.min_gram_eigenvalue() >= 0.1

    def test_reproducible(self):
        assert np.array_equal(generate_design(4, 2, 5).x, generate_design(4, 2, 5).x)

    def test_unreachable_floor(self):
        with pytest.raises(ConfigurationError):
            generate_design(2, 2, seed=0, gram_floor=0.9)

    def test_norm_above_one(self):
        with pytest.raises(ConfigurationError):
            MglmmDesign(N=1, p=1, x=np.array([[[1.5]]])).validate()

    def test_dimension_mismatch(self, mglmm_data):
        with pytest.raises(ContractError):
            simulate_mglmm(MglmmParams([0.1], [0.2], 1.0), mglmm_data.design, seed=0)

    def test_binary_responses(self, mglmm_data):
        assert set(np.unique(mglmm_data.y2)) <= {0.0, 1.0}
        with pytest.raises(ContractError):
            MglmmDataset(design=mglmm_data.design, y1=mglmm_data.y1, y2=mglmm_data.y2 + 0.5)


class TestJointDensity:
    """Derivatives of log f(y, u) in u and theta"""

    def test_gradient(self, mglmm_theta0, mglmm_data):
        u = np.linspace(-0.5, 0.5, 8)
        numeric = central_difference(lambda v: joint_logdensity(mglmm_theta0, mglmm_data, v), u)
        assert np.allclose(joint_gradient(mglmm_theta0, mglmm_data, u), numeric, atol=1e-6)

    def test_hessian(self, mglmm_theta0, mglmm_data):
        u = np.linspace(-0.5, 0.5, 8)
        numeric = np.array([central_difference(lambda v: joint_gradient(mglmm_theta0, mglmm_data, v)[k], u)
                            for k in range(8)])
        assert np.allclose(joint_hessian(mglmm_theta0, mglmm_data, u), numeric, atol=1e-6)

    def test_batch_evaluation(self, mglmm_theta0, mglmm_data):
        u = np.random.default_rng(0).standard_normal((3, 8))
        batch = joint_logdensity(mglmm_theta0, mglmm_data, u)
        single = [joint_logdensity(mglmm_theta0, mglmm_data, row) for row in u]
        assert np.allclose(batch, single)
        gradients = joint_gradient(mglmm_theta0, mglmm_data, u)
        assert gradients.shape == (3, 8)
        assert np.allclose(gradients, [joint_gradient(mglmm_theta0, mglmm_data, row) for row in u])

    def test_theta_gradient(self, mglmm_theta0, mglmm_data):
        u = np.random.default_rng(1).standard_normal(8)
        numeric = central_difference(
            lambda values: joint_logdensity(mglmm_theta0.with_array(values), mglmm_data, u),
            mglmm_theta0.as_array())
        assert np.allclose(joint_theta_gradient(mglmm_theta0, mglmm_data, u)[0], numeric, atol=1e-6)


class TestQuadrature:
    """Logistic-normal integrals"""

    def test_symmetry(self):
        assert logistic_normal_mean(0.0, 2.0) == pytest.approx(0.5, abs=1e-14)

    def test_vanishing_variance(self):
        assert logistic_normal_mean(0.7, 1e-12) == pytest.approx(expit(0.7), abs=1e-9)

    def test_node_convergence(self):
        """96 nodes agree with 200 across the variance range"""
        for thetad in (0.05, 1.0, 4.0):
            low = marginal_success_prob(np.array([0.5, -0.2]), np.array([0.3, 0.2]), thetad, nodes=96)
            high = marginal_success_prob(np.array([0.5, -0.2]), np.array([0.3, 0.2]), thetad, nodes=200)
            assert low == pytest.approx(high, abs=1e-8)

    def test_default_rule_size(self):
        x, beta2 = np.array([0.9, -0.4]), np.array([2.0, 1.5])
        assert get_config().QUADRATURE_NODES == 96
        assert marginal_success_prob(x, beta2, 4.0) == marginal_success_prob(x, beta2, 4.0, nodes=96)
        assert marginal_success_prob(x, beta2, 4.0) == pytest.approx(
            marginal_success_prob(x, beta2, 4.0, nodes=256), abs=1e-8)

    def test_monte_carlo(self):
        rng = np.random.default_rng(2)
        draws = expit(0.4 + np.sqrt(2.0) * rng.standard_normal(400_000))
        assert logistic_normal_mean(0.4, 2.0) == pytest.approx(draws.mean(), abs=5 * draws.std() / np.sqrt(draws.size))

    def test_bernoulli_kl(self):
        assert bernoulli_kl(0.3, 0.3) == pytest.approx(0.0)
        assert bernoulli_kl(0.3, 0.6) > 0
        expected = 0.3 * np.log(0.3 / 0.6) + 0.7 * np.log(0.7 / 0.4)
        assert bernoulli_kl(0.3, 0.6) == pytest.approx(expected)


class TestSubcollectionRatios:
    """W1 (normal) and W2 (binary) diagonal subcollections"""

    def test_zero_at_truth(self, mglmm_theta0, mglmm_data):
        assert subcoll_ratio_normal(mglmm_theta0, mglmm_theta0, mglmm_data) == pytest.approx(0.0)
        assert subcoll_ratio_bernoulli(mglmm_theta0, mglmm_theta0, mglmm_data) == pytest.approx(0.0)

    def test_expected_ratios_negative(self, mglmm_theta0):
        design = generate_design(8, 2, seed=4)
        theta = MglmmParams([0.7, -0.4], [0.1, 0.5], 1.3)
        assert normal_expected_ratio(theta, mglmm_theta0, design) < 0
        assert bernoulli_expected_ratio(theta, mglmm_theta0, design) < 0
        assert normal_expected_ratio(mglmm_theta0, mglmm_theta0, design) == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("theta", [
        MglmmParams([0.5, -0.5], [0.6, 0.2], 1.05),
        MglmmParams([0.5, -0.5], [0.3, -0.2], 0.9),
        MglmmParams([0.5, -0.5], [0.3, 0.2], 1.5),
    ])
    def test_split_bound_is_upper_bound(self, mglmm_theta0, theta):
        design = generate_design(8, 2, seed=6)
        bound = bernoulli_split_bound(theta, mglmm_theta0, design)
        assert bound <= 0
        assert bernoulli_expected_ratio(theta, mglmm_theta0, design) <= bound + 1e-12

    def test_split_bound_when_beta2_moves_alone(self, mglmm_theta0):
        """thetad fixed: the bound is -2 B^2, strictly negative and still above the expected ratio"""
        design = generate_design(16, 2, seed=6)
        theta = MglmmParams([0.5, -0.5], [0.7, 0.4], 1.0)
        bound = bernoulli_split_bound(theta, mglmm_theta0, design)
        assert bound < -1e-6
        assert bernoulli_expected_ratio(theta, mglmm_theta0, design) <= bound


class TestImportanceSampling:
    """Laplace-mode importance sampling of log f_theta(y)"""

    def test_mode_zeroes_gradient(self, mglmm_theta0, mglmm_data):
        mode = laplace_mode(mglmm_theta0, mglmm_data)
        assert np.linalg.norm(joint_gradient(mglmm_theta0, mglmm_data, mode.mode)) <= 1e-8
        assert build_proposal(mode).dimension == 8

    def test_matches_quadrature_oracle(self, single_cell_data):
        theta, data = single_cell_data
        estimate, stderr = full_loglik_mglmm(theta, data, ApproxConfig(samples=4096, seed=3))
        oracle = adaptive_quadrature_loglik(theta, data)
        assert abs(estimate - oracle) <= 4 * stderr + 1e-4

    def test_common_random_numbers(self, mglmm_theta0, mglmm_data):
        cfg = ApproxConfig(samples=256, seed=9)
        assert full_loglik_mglmm(mglmm_theta0, mglmm_data, cfg) == full_loglik_mglmm(mglmm_theta0, mglmm_data, cfg)

    @pytest.mark.parametrize("theta", [
        MglmmParams([0.5, -0.5], [0.3, 0.2], 1.0),
        MglmmParams([0.2, -0.1], [0.9, -0.4], 0.6),
    ])
    def test_score_is_estimator_derivative(self, theta, mglmm_data):
        """The score differentiates the same fixed-seed estimator, mode and proposal included"""
        cfg = ApproxConfig(samples=512, seed=2)
        numeric = central_difference(
            lambda values: full_loglik_mglmm(theta.with_array(values), mglmm_data, cfg)[0],
            theta.as_array(), h=1e-5)
        assert np.allclose(mglmm_score(theta, mglmm_data, cfg), numeric, rtol=1e-4, atol=1e-5)

    def test_mode_sensitivities(self, mglmm_theta0, mglmm_data):
        d_mode, d_precision = mode_sensitivities(mglmm_theta0, mglmm_data,
                                                 laplace_mode(mglmm_theta0, mglmm_data))
        start = mglmm_theta0.as_array()
        for k in range(start.size):
            step = np.zeros_like(start)
            step[k] = 1e-5
            upper = laplace_mode(mglmm_theta0.with_array(start + step), mglmm_data)
            lower = laplace_mode(mglmm_theta0.with_array(start - step), mglmm_data)
            assert np.allclose(d_mode[k], (upper.mode - lower.mode) / 2e-5, atol=1e-6)
            assert np.allclose(d_precision[k], (lower.hessian - upper.hessian) / 2e-5, atol=1e-5)

    def test_value_and_score(self, mglmm_theta0, mglmm_data):
        cfg = ApproxConfig(samples=128, seed=1)
        estimate, stderr, score = mglmm_value_and_score(mglmm_theta0, mglmm_data, cfg)
        assert (estimate, stderr) == full_loglik_mglmm(mglmm_theta0, mglmm_data, cfg)
        assert np.array_equal(score, mglmm_score(mglmm_theta0, mglmm_data, cfg))

    def test_size_cap(self, mglmm_theta0):
        design = generate_design(10, 2, seed=0)
        data = simulate_mglmm(mglmm_theta0, design, seed=0)
        with pytest.raises(ConfigurationError):
            full_loglik_mglmm(mglmm_theta0, data, ApproxConfig(samples=16, max_n=8))

    def test_oracle_needs_single_cell(self, mglmm_theta0, mglmm_data):
        with pytest.raises(ConfigurationError):
            adaptive_quadrature_loglik(mglmm_theta0, mglmm_data)

    def test_too_few_samples(self):
        with pytest.raises(ConfigurationError):
            ApproxConfig(samples=1)


class TestSimulationMoments:
    """Empirical moments of simulated responses"""

    def test_normal_and_binary_moments(self):
        theta = MglmmParams([0.5, -0.5], [0.8, -0.6], 1.0)
        design = generate_design(6, 2, seed=4)
        datasets = [simulate_mglmm(theta, design, seed) for seed in range(400)]
        residual = np.array([data.y1 for data in datasets]) - design.x @ theta.beta1
        assert residual.mean() == pytest.approx(0.0, abs=0.1)
        assert np.mean(residual ** 2) == pytest.approx(1.0 + 2.0 * theta.thetad, abs=0.3)
        cell_means = np.mean([data.y2 for data in datasets], axis=0)
        expected = marginal_success_prob(design.x, theta.beta2, theta.thetad)
        assert np.allclose(cell_means, expected, atol=0.1)
        assert cell_means.mean() == pytest.approx(expected.mean(), abs=0.03)
