# toy.py
"""Crossed toy model Y_{i,j} = theta + U1_i + U2_j + E_{i,j}, every term standard normal.

The covariance I + I_N (x) J_N + J_N (x) I_N has eigenvalues 1 + 2N, 1 + N
(twice N - 1 times) and 1 in the rotated basis, so the log-likelihood and score
are closed form.
"""
from enum import Enum

import numpy as np
from scipy.linalg import helmert

from ..errors import ConfigurationError, ContractError
from .params import ToyParams
from .streams import stream

LOG_2PI = np.log(2.0 * np.pi)


class ToySubset(str, Enum):
    DIAGONAL = "diagonal"
    OFFDIAGONAL = "offdiagonal"


def _check(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ContractError(f"Toy data must be a square matrix, got shape {data.shape}")
    if data.shape[0] < 2:
        raise ConfigurationError("N", f"must be at least 2, got {data.shape[0]}")
    return data


def simulate_toy(theta_mean: float, N: int, seed: int) -> np.ndarray:
    if int(N) != N or N < 2:
        raise ConfigurationError("N", f"must be an integer >= 2, got {N}")
    u1 = stream(seed, 0).standard_normal(N)
    u2 = stream(seed, 1).standard_normal(N)
    noise = stream(seed, 2).standard_normal((N, N))
    return theta_mean + u1[:, None] + u2[None, :] + noise


def fit_toy(data: np.ndarray) -> float:
    """Grand mean, the MLE under the exchangeable covariance"""
    return float(np.mean(_check(data)))


def toy_variance(N: int) -> float:
    """Exact sampling variance (2N^3 + N^2) / N^4 of the grand mean"""
    return (2.0 * N ** 3 + N ** 2) / N ** 4


def fit_toy_subcollection(data: np.ndarray, which: ToySubset) -> float:
    """Mean of the diagonal cells (Y_11..Y_NN) or of the superdiagonal (Y_12..Y_{N-1,N})"""
    data = _check(data)
    if ToySubset(which) is ToySubset.DIAGONAL:
        return float(np.mean(np.diag(data)))
    return float(np.mean(np.diag(data, k=1)))


def _eigenvalues(N: int) -> np.ndarray:
    values = np.ones((N, N))
    values[0, :] += N
    values[:, 0] += N
    return values


def toy_loglik(theta: ToyParams, data: np.ndarray) -> float:
    data = _check(data)
    N = data.shape[0]
    basis = helmert(N, full=True)
    rotated = basis @ (data - theta.theta) @ basis.T
    values = _eigenvalues(N)
    return -0.5 * float(np.sum(rotated ** 2 / values) + np.sum(np.log(values)) + N * N * LOG_2PI)


def toy_score(theta: ToyParams, data: np.ndarray) -> np.ndarray:
    data = _check(data)
    N = data.shape[0]
    return np.array([N * N * (np.mean(data) - theta.theta) / (1.0 + 2.0 * N)])
