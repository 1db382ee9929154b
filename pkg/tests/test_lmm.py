# tests/test_lmm.py - Crossed LMM: simulation, likelihood, score and subcollections
import numpy as np
import pytest
from scipy.stats import multivariate_normal

from src.errors import ConfigurationError, ContractError
from src.linalg.covariance import build_lmm_covariance
from src.models.lmm import (LmmDataset, Subcollection, SubcollectionBatch, check_design,
                            extract_subcollection, gaussian_expected_ratio, lmm_loglik, lmm_loglik_ratio,
                            lmm_score, mean_vector, simulate_lmm, subcollection_expected_ratio,
                            subcollection_loglik_ratio, subcollection_moments, treatment_indicator)
from src.models.params import LmmParams


def flat_index(i, j, t, N, T):
    return (i * N + j) * T + t


# =============================================================================
# UNIT TESTS
# =============================================================================


class TestSimulation:
    """Dataset simulation"""

    def test_shape_and_reproducibility(self, lmm_theta0):
        first = simulate_lmm(lmm_theta0, 4, 6, seed=3)
        second = simulate_lmm(lmm_theta0, 4, 6, seed=3)
        assert first.y.shape == (4, 4, 6)
        assert first.n == 96
        assert np.array_equal(first.y, second.y)

    def test_seeds_differ(self, lmm_theta0):
        assert not np.array_equal(simulate_lmm(lmm_theta0, 4, 4, 1).y, simulate_lmm(lmm_theta0, 4, 4, 2).y)

    def test_read_only(self, lmm_data):
        with pytest.raises(ValueError):
            lmm_data.y[0, 0, 0] = 1.0

    @pytest.mark.parametrize("N,T", [(3, 4), (4, 2), (4, 5), (0, 4)])
    def test_design_validation(self, N, T):
        with pytest.raises(ConfigurationError):
            check_design(N, T)

    def test_wrong_shape(self):
        with pytest.raises(ContractError):
            LmmDataset(N=2, T=4, y=np.zeros((2, 2, 3)))

    def test_treatment_indicator(self):
        assert treatment_indicator(6).tolist() == [1, 1, 1, 0, 0, 0]


class TestLikelihood:
    """Full-data log-likelihood and score"""

    def test_ratio_at_truth_is_zero(self, lmm_theta0, lmm_data):
        assert lmm_loglik_ratio(lmm_theta0, lmm_theta0, lmm_data) == 0.0

    def test_ratio_is_difference(self, lmm_theta0, lmm_data):
        theta = lmm_theta0.with_array(lmm_theta0.as_array() + 0.1)
        expected = lmm_loglik(theta, lmm_data) - lmm_loglik(lmm_theta0, lmm_data)
        assert lmm_loglik_ratio(theta, lmm_theta0, lmm_data) == pytest.approx(expected)

    def test_wrong_data_type(self, lmm_theta0):
        with pytest.raises(ContractError):
            lmm_loglik(lmm_theta0, np.zeros((4, 4)))

    @pytest.mark.parametrize("theta", [
        LmmParams(1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0.3),
        LmmParams(0.2, -1.0, 0.4, 2.0, 0.5, 0.8, -0.6),
    ])
    def test_score_matches_central_differences(self, theta, lmm_data):
        """Analytic score against central differences in natural coordinates"""
        values = theta.as_array()
        numeric = np.empty_like(values)
        h = 1e-6
        for k in range(values.size):
            step = np.zeros_like(values)
            step[k] = h
            numeric[k] = (lmm_loglik(theta.with_array(values + step), lmm_data)
                          - lmm_loglik(theta.with_array(values - step), lmm_data)) / (2 * h)
        assert np.allclose(lmm_score(theta, lmm_data), numeric, rtol=1e-5, atol=1e-5)

    def test_score_on_structured_path(self, lmm_theta0):
        """Score for a design above the dense cap"""
        data = simulate_lmm(lmm_theta0, 8, 8, seed=4)
        score = lmm_score(lmm_theta0, data)
        assert score.shape == (7,)
        assert np.all(np.isfinite(score))


class TestSubcollections:
    """Independent blocks W1 and W2"""

    def test_extract_w1(self, lmm_data):
        sub = extract_subcollection(lmm_data, Subcollection.W1)
        assert sub.m == 2
        assert sub.blocks[0].tolist() == [lmm_data.y[0, 0, 0], lmm_data.y[1, 1, 3]]
        assert sub.blocks[1].tolist() == [lmm_data.y[2, 2, 0], lmm_data.y[3, 3, 3]]

    def test_extract_w2(self, lmm_data):
        sub = extract_subcollection(lmm_data, "W2")
        y = lmm_data.y
        assert sub.blocks.shape == (2, 5)
        assert sub.blocks[1].tolist() == [y[2, 2, 0], y[2, 2, 1], y[2, 2, 2], y[2, 3, 0], y[3, 2, 0]]

    @pytest.mark.parametrize("which,cells", [
        (Subcollection.W1, [(0, 0, 0), (1, 1, 3)]),
        (Subcollection.W2, [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0), (1, 0, 0)]),
    ])
    def test_moments_match_full_covariance(self, lmm_theta0, which, cells):
        """Block moments equal the corresponding entries of mu(theta) and C(theta)"""
        N, T = 2, 4
        index = [flat_index(i, j, t, N, T) for i, j, t in cells]
        dense = build_lmm_covariance(lmm_theta0, N, T).to_dense()
        mean, cov = subcollection_moments(lmm_theta0, which, T)
        assert np.allclose(mean, mean_vector(lmm_theta0, N, T)[index])
        assert np.allclose(cov, dense[np.ix_(index, index)])

    def test_long_horizon_mean(self, lmm_theta0):
        """Without T every W2 component is treated"""
        mean, _ = subcollection_moments(lmm_theta0, Subcollection.W2)
        assert np.allclose(mean, lmm_theta0.theta1 + lmm_theta0.theta2)

    def test_ratio_matches_scipy(self, lmm_theta0, lmm_data):
        theta = LmmParams(1.3, 0.2, 1.1, 0.9, 1.2, 0.8, 0.1)
        for which in Subcollection:
            sub = extract_subcollection(lmm_data, which)
            mean, cov = subcollection_moments(theta, which, 4)
            mean0, cov0 = subcollection_moments(lmm_theta0, which, 4)
            expected = np.sum(multivariate_normal.logpdf(sub.blocks, mean, cov)
                              - multivariate_normal.logpdf(sub.blocks, mean0, cov0))
            assert subcollection_loglik_ratio(theta, lmm_theta0, sub) == pytest.approx(expected, rel=1e-10)

    def test_batch_matches_pointwise(self, lmm_theta0):
        data = simulate_lmm(lmm_theta0, 8, 4, seed=9)
        rng = np.random.default_rng(1)
        points = [lmm_theta0.with_array(lmm_theta0.as_array() + 0.2 * rng.uniform(-1, 1, 7)) for _ in range(5)]
        for which in Subcollection:
            sub = extract_subcollection(data, which)
            batch = SubcollectionBatch(points, lmm_theta0, which, 4)
            expected = [subcollection_loglik_ratio(theta, lmm_theta0, sub) for theta in points]
            assert np.allclose(batch.ratios(sub), expected, rtol=1e-9, atol=1e-9)

    def test_expected_ratio_is_negative_kl(self, lmm_theta0):
        theta = lmm_theta0.with_array(lmm_theta0.as_array() + 0.3)
        for which in Subcollection:
            assert subcollection_expected_ratio(theta, lmm_theta0, which, 4) < 0
            assert subcollection_expected_ratio(lmm_theta0, lmm_theta0, which, 4) == pytest.approx(0.0, abs=1e-12)

    def test_univariate_kl(self):
        """-KL(N(0, 1) || N(1, 2)) = -(log 2 + 1/2 + 1/2 - 1)/2"""
        value = gaussian_expected_ratio(np.array([1.0]), np.array([[2.0]]), np.array([0.0]), np.array([[1.0]]))
        assert value == pytest.approx(-0.5 * np.log(2.0))


# =============================================================================
# MONTE CARLO TESTS
# =============================================================================


class TestSubcollectionMonteCarlo:
    """Sampling behaviour of the block likelihood ratio"""

    @pytest.mark.slow
    def test_unit_mean(self, lmm_theta0):
        """E[L_m(theta; W)] = 1 under theta0"""
        theta = LmmParams(1.2, 0.4, 1.1, 0.9, 1.0, 1.1, 0.25)
        ratios = []
        for seed in range(2000):
            sub = extract_subcollection(simulate_lmm(lmm_theta0, 4, 4, seed), Subcollection.W1)
            ratios.append(np.exp(subcollection_loglik_ratio(theta, lmm_theta0, sub)))
        ratios = np.array(ratios)
        assert abs(ratios.mean() - 1.0) <= 3 * ratios.std(ddof=1) / np.sqrt(ratios.size)


class TestSimulationMoments:
    """Empirical covariances of simulated responses"""

    def test_crossed_covariances(self):
        """Same row shares u1 (theta4), same column u2 (theta5), one cell adds the AR(1) part"""
        theta = LmmParams(1.0, 0.5, 1.0, 0.6, 1.4, 0.8, 0.5)
        N, T = 16, 4
        mean = theta.theta1 + theta.theta2 * treatment_indicator(T)
        same_row, same_column, same_cell, variance = [], [], [], []
        for seed in range(100):
            residual = simulate_lmm(theta, N, T, seed).y - mean
            first = residual[..., 0]
            squares = first ** 2
            same_row.append(np.sum(first.sum(axis=1) ** 2 - squares.sum(axis=1)) / (N * N * (N - 1)))
            same_column.append(np.sum(first.sum(axis=0) ** 2 - squares.sum(axis=0)) / (N * N * (N - 1)))
            same_cell.append(np.mean(residual[..., 0] * residual[..., 1]))
            variance.append(np.mean(squares))
        assert np.mean(same_row) == pytest.approx(theta.theta4, abs=0.15)
        assert np.mean(same_column) == pytest.approx(theta.theta5, abs=0.25)
        assert np.mean(same_cell) == pytest.approx(theta.theta4 + theta.theta5 + theta.theta6 * theta.theta7,
                                                   abs=0.3)
        assert np.mean(variance) == pytest.approx(theta.theta3 + theta.theta4 + theta.theta5 + theta.theta6,
                                                  abs=0.35)
