# importance.py
"""Marginal log-likelihood of the MGLMM by Laplace-mode importance sampling.

The integrand log f(y | u) + log phi(u) is strictly concave in u, so a damped
Newton iteration finds its mode. The proposal is N(mode, (-H)^-1); draws are
u = mode + R^-T z with -H = R R^T and z taken from cfg.seed alone, so the same
z is reused for every theta (common random numbers). With z fixed the
estimator is a smooth function of theta; its score differentiates through the
mode and the factor R as well as the integrand.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import structlog
from scipy.linalg import lapack, solve_triangular
from scipy.special import expit, logsumexp

from ..config import get_config
from ..errors import ConfigurationError, NumericalError
from .mglmm import (MglmmDataset, joint_gradient, joint_hessian, joint_logdensity, joint_theta_gradient,
                    split_effects)
from .params import MglmmParams
from .quadrature import hermite_rule
from .streams import stream

logger = structlog.get_logger()

LOG_2PI = np.log(2.0 * np.pi)
MAX_HALVINGS = 30


@dataclass(frozen=True)
class ApproxConfig:
    """Importance-sampling settings; None fields take the process configuration"""

    samples: Optional[int] = None
    seed: int = 0
    max_iter: Optional[int] = None
    tol: Optional[float] = None
    max_n: Optional[int] = None

    def __post_init__(self):
        config = get_config()
        for name, default in (("samples", config.IS_SAMPLES), ("max_iter", config.NEWTON_MAX_ITER),
                              ("tol", config.NEWTON_TOL), ("max_n", config.IS_MAX_N)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.samples < 2:
            raise ConfigurationError("samples", f"must be at least 2, got {self.samples}")


@dataclass(frozen=True, eq=False)
class LaplaceMode:
    mode: np.ndarray
    hessian: np.ndarray
    iterations: int
    trace: List[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Proposal:
    mean: np.ndarray
    root: np.ndarray

    @property
    def dimension(self) -> int:
        return self.mean.size

    @property
    def log_det_root(self) -> float:
        return float(np.sum(np.log(np.diag(self.root))))

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Map standard normal draws (S, r) to proposal draws"""
        return self.mean + solve_triangular(self.root.T, z.T, lower=False, check_finite=False).T

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        """Proposal log density at transform(z)"""
        return -0.5 * np.sum(z ** 2, axis=1) - 0.5 * self.dimension * LOG_2PI + self.log_det_root


@dataclass(frozen=True, eq=False)
class ImportanceEstimate:
    estimate: float
    stderr: float
    draws: np.ndarray
    weights: np.ndarray


def _check_size(data: MglmmDataset, cfg: ApproxConfig):
    if data.N > cfg.max_n:
        raise ConfigurationError("N", f"importance sampling is capped at N={cfg.max_n}, got {data.N}")


def _exact_mode(theta: MglmmParams, data: MglmmDataset, u: np.ndarray, gradient: np.ndarray,
                hessian: np.ndarray, iterations: int, trace: List[float]) -> LaplaceMode:
    # One more full Newton step: derivatives through the mode assume it is exact
    u = u + np.linalg.solve(-hessian, gradient)
    logger.debug("laplace_mode_converged", iterations=iterations, grad_norm=trace[-1], dimension=u.size)
    return LaplaceMode(mode=u, hessian=joint_hessian(theta, data, u), iterations=iterations, trace=trace)


def laplace_mode(theta: MglmmParams, data: MglmmDataset, cfg: Optional[ApproxConfig] = None) -> LaplaceMode:
    """Mode of the joint log density in u by damped Newton"""
    cfg = cfg or ApproxConfig()
    u = np.zeros(2 * data.N)
    value = float(joint_logdensity(theta, data, u))
    trace = []
    for iteration in range(cfg.max_iter):
        gradient = joint_gradient(theta, data, u)
        trace.append(float(np.linalg.norm(gradient)))
        hessian = joint_hessian(theta, data, u)
        if trace[-1] <= cfg.tol:
            return _exact_mode(theta, data, u, gradient, hessian, iteration, trace)
        step = np.linalg.solve(-hessian, gradient)
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = u + scale * step
            candidate_value = float(joint_logdensity(theta, data, candidate))
            if candidate_value >= value:
                break
            scale *= 0.5
        u, value = candidate, candidate_value
    gradient = joint_gradient(theta, data, u)
    trace.append(float(np.linalg.norm(gradient)))
    if trace[-1] <= cfg.tol:
        return _exact_mode(theta, data, u, gradient, joint_hessian(theta, data, u), cfg.max_iter, trace)
    raise NumericalError("Newton iteration for the Laplace mode did not converge", trace=trace)


def build_proposal(mode: LaplaceMode) -> Proposal:
    root, info = lapack.dpotrf(-mode.hessian, lower=1, clean=1)
    if info > 0:
        raise NumericalError("Negative Hessian at the mode is not positive definite", pivot=int(info))
    return Proposal(mean=mode.mode, root=root)


def standard_draws(cfg: ApproxConfig, dimension: int) -> np.ndarray:
    """Standard normal draws shared by every theta evaluated with this configuration"""
    return stream(cfg.seed).standard_normal((cfg.samples, dimension))


def importance_estimate(theta: MglmmParams, data: MglmmDataset, proposal: Proposal,
                        z: np.ndarray) -> ImportanceEstimate:
    """Log-mean-exp of the importance weights with a delta-method standard error"""
    draws = proposal.transform(z)
    log_weights = joint_logdensity(theta, data, draws) - proposal.logpdf(z)
    samples = log_weights.size
    estimate = float(logsumexp(log_weights) - np.log(samples))
    scaled = np.exp(log_weights - log_weights.max())
    stderr = float(np.std(scaled, ddof=1) / (np.sqrt(samples) * np.mean(scaled)))
    return ImportanceEstimate(estimate=estimate, stderr=stderr, draws=draws,
                              weights=scaled / scaled.sum())


def _evaluate(theta: MglmmParams, data: MglmmDataset,
              cfg: ApproxConfig) -> Tuple[LaplaceMode, Proposal, np.ndarray, ImportanceEstimate]:
    theta.validate()
    _check_size(data, cfg)
    mode = laplace_mode(theta, data, cfg)
    proposal = build_proposal(mode)
    z = standard_draws(cfg, proposal.dimension)
    return mode, proposal, z, importance_estimate(theta, data, proposal, z)


def _crossed_matrix(weight: np.ndarray) -> np.ndarray:
    """[[diag(row sums), W], [W^T, diag(column sums)]] for an (N, N) cell weight"""
    N = weight.shape[0]
    matrix = np.empty((2 * N, 2 * N))
    matrix[:N, :N] = np.diag(weight.sum(axis=1))
    matrix[N:, N:] = np.diag(weight.sum(axis=0))
    matrix[:N, N:] = weight
    matrix[N:, :N] = weight.T
    return matrix


def mode_sensitivities(theta: MglmmParams, data: MglmmDataset,
                       mode: LaplaceMode) -> Tuple[np.ndarray, np.ndarray]:
    """
    Total derivatives in theta of the mode and of the precision -H at the mode

    Returns:
        (d mode / d theta of shape (2p+1, 2N), d(-H) / d theta of shape (2p+1, 2N, 2N))
    """
    N, p = data.N, theta.p
    x = data.design.x
    u1, u2 = split_effects(mode.mode, N)
    prob = expit(x @ theta.beta2 + u1[:, None] + u2[None, :])
    slope = prob * (1.0 - prob)
    curvature = slope * (1.0 - 2.0 * prob)
    dimension = 2 * p + 1

    # Partial derivatives of grad_u log f(y, u) at the mode
    cross = np.empty((dimension, 2 * N))
    for k in range(p):
        cross[k] = np.concatenate([-x[..., k].sum(axis=1), -x[..., k].sum(axis=0)])
        weighted = -slope * x[..., k]
        cross[p + k] = np.concatenate([weighted.sum(axis=1), weighted.sum(axis=0)])
    cross[2 * p] = mode.mode / theta.thetad ** 2
    d_mode = np.linalg.solve(-mode.hessian, cross.T).T

    d_precision = np.empty((dimension, 2 * N, 2 * N))
    for k in range(dimension):
        d_u1, d_u2 = split_effects(d_mode[k], N)
        d_eta = d_u1[:, None] + d_u2[None, :]
        if p <= k < 2 * p:
            d_eta = d_eta + x[..., k - p]
        d_precision[k] = _crossed_matrix(curvature * d_eta)
    d_precision[2 * p][np.diag_indices(2 * N)] -= 1.0 / theta.thetad ** 2
    return d_mode, d_precision


def _total_score(theta: MglmmParams, data: MglmmDataset, mode: LaplaceMode, proposal: Proposal,
                 z: np.ndarray, result: ImportanceEstimate) -> np.ndarray:
    """
    Derivative of the estimator in theta with z held fixed

    Each draw u = mode + L^-T z moves with theta through the mode and the
    Cholesky factor L of -H, and the proposal density carries log det L.
    """
    root = proposal.root
    offsets = result.draws - proposal.mean
    root_inverse = solve_triangular(root, np.eye(root.shape[0]), lower=True, check_finite=False)
    grad_u = joint_gradient(theta, data, result.draws)
    score = result.weights @ joint_theta_gradient(theta, data, result.draws)
    d_mode, d_precision = mode_sensitivities(theta, data, mode)
    for k in range(score.size):
        phi = np.tril(root_inverse @ d_precision[k] @ root_inverse.T)
        phi[np.diag_indices_from(phi)] *= 0.5
        d_root = root @ phi
        d_offsets = -solve_triangular(root.T, d_root.T @ offsets.T, lower=False, check_finite=False).T
        moved = np.sum(grad_u * (d_mode[k] + d_offsets), axis=1)
        score[k] += result.weights @ moved - np.trace(phi)
    return score


def full_loglik_mglmm(theta: MglmmParams, data: MglmmDataset,
                      cfg: Optional[ApproxConfig] = None) -> Tuple[float, float]:
    """(estimate of log f_theta(y), Monte Carlo standard error)"""
    result = _evaluate(theta, data, cfg or ApproxConfig())[3]
    return result.estimate, result.stderr


def mglmm_score(theta: MglmmParams, data: MglmmDataset,
                cfg: Optional[ApproxConfig] = None) -> np.ndarray:
    """Exact derivative in theta of full_loglik_mglmm for the same configuration"""
    return mglmm_value_and_score(theta, data, cfg)[2]


def mglmm_value_and_score(theta: MglmmParams, data: MglmmDataset,
                          cfg: Optional[ApproxConfig] = None) -> Tuple[float, float, np.ndarray]:
    mode, proposal, z, result = _evaluate(theta, data, cfg or ApproxConfig())
    return result.estimate, result.stderr, _total_score(theta, data, mode, proposal, z, result)


def adaptive_quadrature_loglik(theta: MglmmParams, data: MglmmDataset, nodes: int = 128) -> float:
    """
    Mode-centred, curvature-scaled tensor Gauss-Hermite value of log f_theta(y)

    Only N = 1 (two random effects) is supported; it is the oracle for the
    importance-sampling estimator.
    """
    if data.N != 1:
        raise ConfigurationError("N", f"adaptive quadrature oracle needs N=1, got {data.N}")
    theta.validate()
    mode = laplace_mode(theta, data, ApproxConfig(samples=2))
    proposal = build_proposal(mode)
    points, weights = hermite_rule(nodes)
    grid = np.stack(np.meshgrid(points, points, indexing="ij"), axis=-1).reshape(-1, 2)
    with np.errstate(divide="ignore"):
        log_weights = np.log(np.outer(weights, weights).ravel())
    draws = proposal.transform(np.sqrt(2.0) * grid)
    terms = log_weights + joint_logdensity(theta, data, draws) + np.sum(grid ** 2, axis=1)
    return float(logsumexp(terms) + np.log(2.0) - proposal.log_det_root)
