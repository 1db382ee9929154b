# lmm.py
"""Longitudinal LMM with crossed subject effects and AR(1) within-cell dependence.

Y_{i,j,t} = theta1 + theta2 * 1{t <= T/2} + U1_i + U2_j + U3_{i,j,t} + e_{i,j,t}

with U1 ~ N(0, theta4), U2 ~ N(0, theta5), U3_{i,j,.} ~ N(0, theta6 Psi(theta7))
and e ~ N(0, theta3). Data are stored as an (N, N, T) array; flattening it in C
order gives the t-fastest stacking used by the covariance module.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.linalg import lapack, solve_triangular

from ..errors import ConfigurationError, ContractError, NumericalError
from ..linalg.covariance import StructuredFactor, ar1_matrix, build_lmm_covariance, gaussian_kernel
from .params import LmmParams
from .streams import stream

logger = structlog.get_logger()

LOG_2PI = np.log(2.0 * np.pi)


class Subcollection(str, Enum):
    W1 = "W1"
    W2 = "W2"


@dataclass(frozen=True, eq=False)
class LmmDataset:
    N: int
    T: int
    y: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.shape != (self.N, self.N, self.T):
            raise ContractError(f"Response array has shape {y.shape}, expected {(self.N, self.N, self.T)}")
        y.flags.writeable = False
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.T * self.N * self.N

    def vector(self) -> np.ndarray:
        return self.y.ravel()


@dataclass(frozen=True, eq=False)
class LmmSubcollection:
    which: Subcollection
    blocks: np.ndarray
    T: int

    @property
    def m(self) -> int:
        return self.blocks.shape[0]


def check_design(N: int, T: int):
    if int(N) != N or N < 2 or N % 2:
        raise ConfigurationError("N", f"must be a positive even integer, got {N}")
    if int(T) != T or T < 4 or T % 2:
        raise ConfigurationError("T", f"must be an even integer >= 4, got {T}")


def treatment_indicator(T: int) -> np.ndarray:
    """h over one cell: 1 for the first T/2 time points, else 0"""
    return (np.arange(T) < T // 2).astype(float)


def mean_vector(theta: LmmParams, N: int, T: int) -> np.ndarray:
    return np.tile(theta.theta1 + theta.theta2 * treatment_indicator(T), N * N)


def simulate_lmm(theta: LmmParams, N: int, T: int, seed: int) -> LmmDataset:
    """Draw one dataset; every random effect has its own stream below `seed`"""
    theta.validate()
    check_design(N, T)
    u1 = np.sqrt(theta.theta4) * stream(seed, 0).standard_normal(N)
    u2 = np.sqrt(theta.theta5) * stream(seed, 1).standard_normal(N)
    psi = ar1_matrix(T, theta.theta7, name="theta7").entries
    root = np.linalg.cholesky(theta.theta6 * psi)
    u3 = stream(seed, 2).standard_normal((N, N, T)) @ root.T
    noise = np.sqrt(theta.theta3) * stream(seed, 3).standard_normal((N, N, T))
    mean = theta.theta1 + theta.theta2 * treatment_indicator(T)
    y = mean[None, None, :] + u1[:, None, None] + u2[None, :, None] + u3 + noise
    return LmmDataset(N=N, T=T, y=y, seed=seed)


def lmm_loglik(theta: LmmParams, data: LmmDataset, method: str = "auto") -> float:
    """Exact Gaussian log density of the stacked responses"""
    if not isinstance(data, LmmDataset):
        raise ContractError(f"Expected an LmmDataset, got {type(data).__name__}")
    cov = build_lmm_covariance(theta, data.N, data.T)
    residual = data.vector() - mean_vector(theta, data.N, data.T)
    quad, logdet = gaussian_kernel(cov, residual, method=method)
    return -0.5 * (logdet + quad + data.n * LOG_2PI)


def lmm_loglik_ratio(theta: LmmParams, theta0: LmmParams, data: LmmDataset) -> float:
    """Lambda_n(theta; Y) = log f_theta(Y) - log f_theta0(Y)"""
    if theta == theta0:
        return 0.0
    return lmm_loglik(theta, data) - lmm_loglik(theta0, data)


def lmm_score(theta: LmmParams, data: LmmDataset) -> np.ndarray:
    """Analytic gradient of lmm_loglik with respect to theta1..theta7"""
    if not isinstance(data, LmmDataset):
        raise ContractError(f"Expected an LmmDataset, got {type(data).__name__}")
    cov = build_lmm_covariance(theta, data.N, data.T, dense_cap=0)
    residual = data.vector() - mean_vector(theta, data.N, data.T)
    alpha, variance_grad = StructuredFactor(cov).variance_gradient(residual)
    h = np.tile(treatment_indicator(data.T), data.N * data.N)
    return np.concatenate([[alpha.sum(), h @ alpha], variance_grad])


def extract_subcollection(data: LmmDataset, which: Subcollection) -> LmmSubcollection:
    """Independent blocks W1 (two diagonal cells) or W2 (one cell plus two neighbours)"""
    which = Subcollection(which)
    N, T = data.N, data.T
    if N % 2:
        raise ConfigurationError("N", f"must be even to pair subjects, got {N}")
    first = 2 * np.arange(N // 2)
    second = first + 1
    y = data.y
    if which is Subcollection.W1:
        blocks = np.column_stack([y[first, first, 0], y[second, second, T - 1]])
    else:
        if T < 3:
            raise ConfigurationError("T", f"W2 needs at least 3 time points, got {T}")
        blocks = np.column_stack([y[first, first, 0], y[first, first, 1], y[first, first, 2],
                                  y[first, second, 0], y[second, first, 0]])
    return LmmSubcollection(which=which, blocks=blocks, T=T)


# One-based time index of every component of a block
_BLOCK_TIMES = {
    Subcollection.W1: None,
    Subcollection.W2: np.array([1, 2, 3, 1, 1]),
}


def subcollection_moments(theta: LmmParams, which: Subcollection,
                          T: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean and covariance of one block

    Args:
        theta: LMM parameters
        which: W1 or W2
        T: Number of time points; None uses the long-horizon mean (treatment on
            every W2 component)
    Returns:
        Tuple of (mean, covariance)
    """
    which = Subcollection(which)
    t1, t2, t3, t4, t5, t6, t7 = theta.as_array()
    total = t3 + t4 + t5 + t6
    if which is Subcollection.W1:
        return np.array([t1 + t2, t1]), total * np.eye(2)
    times = _BLOCK_TIMES[which]
    treated = np.ones(5) if T is None else (times <= T // 2).astype(float)
    mean = t1 + t2 * treated
    shared = t4 + t5
    cov = np.diag(np.full(5, total))
    cov[0, 1] = cov[1, 2] = shared + t6 * t7
    cov[0, 2] = shared + t6 * t7 ** 2
    cov[:3, 3] = t4
    cov[:3, 4] = t5
    cov = np.triu(cov) + np.triu(cov, 1).T
    return mean, cov


def _factor(cov: np.ndarray) -> np.ndarray:
    factor, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise NumericalError("Block covariance is not positive definite", pivot=int(info))
    return factor


def block_logpdf(blocks: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Normal log density of every row of `blocks`"""
    factor = _factor(cov)
    z = solve_triangular(factor, (np.atleast_2d(blocks) - mean).T, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(factor)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + mean.size * LOG_2PI)


def subcollection_loglik_ratio(theta: LmmParams, theta0: LmmParams, sub: LmmSubcollection,
                               T: Optional[int] = None) -> float:
    """Lambda_m(theta; W) summed over the independent blocks"""
    theta.validate()
    theta0.validate()
    T = sub.T if T is None else T
    mean, cov = subcollection_moments(theta, sub.which, T)
    mean0, cov0 = subcollection_moments(theta0, sub.which, T)
    return float(np.sum(block_logpdf(sub.blocks, mean, cov) - block_logpdf(sub.blocks, mean0, cov0)))


def gaussian_expected_ratio(mean: np.ndarray, cov: np.ndarray,
                            mean0: np.ndarray, cov0: np.ndarray) -> float:
    """-KL(N(mean0, cov0) || N(mean, cov))"""
    factor = _factor(cov)
    factor0 = _factor(cov0)
    inv_cov0 = solve_triangular(factor, cov0, lower=True, check_finite=False)
    inv_cov0 = solve_triangular(factor.T, inv_cov0, lower=False, check_finite=False)
    z = solve_triangular(factor, mean - mean0, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(factor)))
    logdet0 = 2.0 * np.sum(np.log(np.diag(factor0)))
    return -0.5 * float(np.trace(inv_cov0) - mean.size + z @ z + logdet - logdet0)


def subcollection_expected_ratio(theta: LmmParams, theta0: LmmParams, which: Subcollection,
                                 T: Optional[int] = None) -> float:
    """Per-block E_theta0[Lambda_1(theta; W)] in closed form"""
    theta.validate()
    theta0.validate()
    mean, cov = subcollection_moments(theta, which, T)
    mean0, cov0 = subcollection_moments(theta0, which, T)
    return gaussian_expected_ratio(mean, cov, mean0, cov0)


class SubcollectionBatch:
    """Block moments of many parameter points, for repeated evaluation of Lambda_m(theta; W)"""

    def __init__(self, points: Sequence[LmmParams], theta0: LmmParams, which: Subcollection,
                 T: Optional[int] = None):
        self.which = Subcollection(which)
        self.T = T
        moments = [subcollection_moments(theta, self.which, T) for theta in points]
        self.means = np.array([mean for mean, _ in moments])
        covs = np.array([cov for _, cov in moments])
        sign, self.logdets = np.linalg.slogdet(covs)
        if np.any(sign <= 0):
            raise NumericalError("Block covariance is not positive definite at a batch point")
        self.inverses = np.linalg.inv(covs)
        self.mean0, self.cov0 = subcollection_moments(theta0, self.which, T)
        self.expected = np.array([gaussian_expected_ratio(mean, cov, self.mean0, self.cov0)
                                  for mean, cov in moments])

    def ratios(self, sub: LmmSubcollection) -> np.ndarray:
        """Lambda_m at every batch point"""
        blocks = sub.blocks
        count, size = blocks.shape
        total = blocks.sum(axis=0)
        scatter = blocks.T @ blocks
        quad = (np.einsum("mij,ji->m", self.inverses, scatter)
                - 2.0 * np.einsum("mi,mij,j->m", self.means, self.inverses, total)
                + count * np.einsum("mi,mij,mj->m", self.means, self.inverses, self.means))
        loglik = -0.5 * (quad + count * self.logdets + count * size * LOG_2PI)
        loglik0 = float(np.sum(block_logpdf(blocks, self.mean0, self.cov0)))
        return loglik - loglik0
