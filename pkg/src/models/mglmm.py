# mglmm.py
"""Logit-normal multivariate GLMM with one normal and one binary response per cell.

eta_{i,j,k} = x_{i,j}^T beta_k + U1_i + U2_j, U1, U2 ~ N(0, thetad I_N)
Y_{i,j,1} | U ~ N(eta_{i,j,1}, 1), Y_{i,j,2} | U ~ Bernoulli(expit(eta_{i,j,2}))

Random effects are stacked as u = (U1_1..U1_N, U2_1..U2_N).
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog
from scipy.special import expit, log_expit
from scipy.stats import norm

from ..config import get_config
from ..errors import ConfigurationError, ContractError, NumericalError
from .params import MglmmParams
from .quadrature import bernoulli_kl, marginal_success_prob
from .streams import stream

logger = structlog.get_logger()

LOG_2PI = np.log(2.0 * np.pi)
MAX_DESIGN_ATTEMPTS = 100
NORM_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class MglmmDesign:
    N: int
    p: int
    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.shape != (self.N, self.N, self.p):
            raise ContractError(f"Predictor array has shape {x.shape}, expected {(self.N, self.N, self.p)}")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)

    @property
    def diagonal(self) -> np.ndarray:
        """Predictors x_{i,i}, shape (N, p)"""
        return self.x[np.arange(self.N), np.arange(self.N)]

    def min_gram_eigenvalue(self) -> float:
        diag = self.diagonal
        return float(np.linalg.eigvalsh(diag.T @ diag / self.N)[0])

    def validate(self, gram_floor: float = 0.0) -> "MglmmDesign":
        norms = np.linalg.norm(self.x, axis=-1)
        if np.any(norms > 1.0 + NORM_SLACK):
            raise ConfigurationError("x", f"predictor norm {norms.max():.6g} exceeds 1")
        if gram_floor > 0 and self.min_gram_eigenvalue() < gram_floor:
            raise ConfigurationError(
                "gram_floor", f"diagonal Gram minimum eigenvalue {self.min_gram_eigenvalue():.4g} < {gram_floor}")
        return self


@dataclass(frozen=True, eq=False)
class MglmmDataset:
    design: MglmmDesign
    y1: np.ndarray
    y2: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        shape = (self.design.N, self.design.N)
        y1 = np.array(self.y1, dtype=float)
        y2 = np.array(self.y2, dtype=float)
        if y1.shape != shape or y2.shape != shape:
            raise ContractError(f"Responses must have shape {shape}, got {y1.shape} and {y2.shape}")
        if not np.all((y2 == 0) | (y2 == 1)):
            raise ContractError("Binary responses must be 0 or 1")
        y1.flags.writeable = False
        y2.flags.writeable = False
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y2", y2)

    @property
    def N(self) -> int:
        return self.design.N

    @property
    def n(self) -> int:
        return 2 * self.N * self.N


def generate_design(N: int, p: int, seed: int, gram_floor: Optional[float] = None) -> MglmmDesign:
    """Predictors uniform in the unit ball, redrawn until the diagonal Gram floor holds"""
    if int(N) != N or N < 1:
        raise ConfigurationError("N", f"must be a positive integer, got {N}")
    if int(p) != p or p < 1:
        raise ConfigurationError("p", f"must be a positive integer, got {p}")
    floor = get_config().GRAM_FLOOR if gram_floor is None else gram_floor
    for attempt in range(MAX_DESIGN_ATTEMPTS):
        rng = stream(seed, attempt)
        direction = rng.standard_normal((N, N, p))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = rng.random((N, N)) ** (1.0 / p)
        design = MglmmDesign(N=N, p=p, x=direction * radius[..., None])
        if floor <= 0 or design.min_gram_eigenvalue() >= floor:
            if attempt:
                logger.debug("design_regenerated", attempts=attempt + 1, N=N, p=p)
            return design
    raise ConfigurationError(
        "gram_floor", f"no design with N={N}, p={p} met the floor {floor} in {MAX_DESIGN_ATTEMPTS} attempts")


def _check_dimensions(theta: MglmmParams, design: MglmmDesign):
    if theta.p != design.p:
        raise ContractError(f"Parameter has p={theta.p}, design has p={design.p}")


def simulate_mglmm(theta: MglmmParams, design: MglmmDesign, seed: int) -> MglmmDataset:
    theta.validate()
    design.validate()
    _check_dimensions(theta, design)
    N = design.N
    scale = np.sqrt(theta.thetad)
    u1 = scale * stream(seed, 0).standard_normal(N)
    u2 = scale * stream(seed, 1).standard_normal(N)
    shared = u1[:, None] + u2[None, :]
    eta1 = design.x @ theta.beta1 + shared
    eta2 = design.x @ theta.beta2 + shared
    y1 = eta1 + stream(seed, 2).standard_normal((N, N))
    y2 = (stream(seed, 3).random((N, N)) < expit(eta2)).astype(float)
    return MglmmDataset(design=design, y1=y1, y2=y2, seed=seed)


def split_effects(u: np.ndarray, N: int):
    u = np.asarray(u, dtype=float)
    return u[..., :N], u[..., N:]


def joint_logdensity(theta: MglmmParams, data: MglmmDataset, u: np.ndarray) -> np.ndarray:
    """log f(y | u) + log phi(u) for one effect vector (2N,) or a batch (S, 2N)"""
    N = data.N
    u1, u2 = split_effects(u, N)
    shared = u1[..., :, None] + u2[..., None, :]
    eta1 = data.design.x @ theta.beta1 + shared
    eta2 = data.design.x @ theta.beta2 + shared
    normal = -0.5 * (data.y1 - eta1) ** 2 - 0.5 * LOG_2PI
    binary = data.y2 * log_expit(eta2) + (1.0 - data.y2) * log_expit(-eta2)
    prior = -0.5 * np.sum(np.asarray(u) ** 2, axis=-1) / theta.thetad - N * np.log(2.0 * np.pi * theta.thetad)
    return np.sum(normal + binary, axis=(-2, -1)) + prior


def joint_gradient(theta: MglmmParams, data: MglmmDataset, u: np.ndarray) -> np.ndarray:
    """Gradient of joint_logdensity with respect to u, for (2N,) or a batch (S, 2N)"""
    N = data.N
    u = np.asarray(u, dtype=float)
    u1, u2 = split_effects(u, N)
    shared = u1[..., :, None] + u2[..., None, :]
    residual = (data.y1 - data.design.x @ theta.beta1 - shared) + (
        data.y2 - expit(data.design.x @ theta.beta2 + shared))
    return np.concatenate([residual.sum(axis=-1), residual.sum(axis=-2)], axis=-1) - u / theta.thetad


def joint_hessian(theta: MglmmParams, data: MglmmDataset, u: np.ndarray) -> np.ndarray:
    """Hessian of joint_logdensity with respect to u; negative definite everywhere"""
    N = data.N
    u1, u2 = split_effects(u, N)
    prob = expit(data.design.x @ theta.beta2 + u1[:, None] + u2[None, :])
    weight = 1.0 + prob * (1.0 - prob)
    hessian = np.empty((2 * N, 2 * N))
    hessian[:N, :N] = np.diag(-weight.sum(axis=1))
    hessian[N:, N:] = np.diag(-weight.sum(axis=0))
    hessian[:N, N:] = -weight
    hessian[N:, :N] = -weight.T
    hessian[np.diag_indices(2 * N)] -= 1.0 / theta.thetad
    return hessian


def joint_theta_gradient(theta: MglmmParams, data: MglmmDataset, u: np.ndarray) -> np.ndarray:
    """Gradient of joint_logdensity with respect to (beta1, beta2, thetad), batch (S, 2p+1)"""
    N = data.N
    u = np.atleast_2d(np.asarray(u, dtype=float))
    u1, u2 = split_effects(u, N)
    shared = u1[:, :, None] + u2[:, None, :]
    x = data.design.x
    normal_residual = data.y1 - x @ theta.beta1 - shared
    binary_residual = data.y2 - expit(x @ theta.beta2 + shared)
    d_beta1 = np.einsum("sij,ijk->sk", normal_residual, x)
    d_beta2 = np.einsum("sij,ijk->sk", binary_residual, x)
    d_thetad = 0.5 * np.sum(u ** 2, axis=1) / theta.thetad ** 2 - N / theta.thetad
    return np.column_stack([d_beta1, d_beta2, d_thetad])


def subcoll_ratio_normal(theta: MglmmParams, theta0: MglmmParams, data: MglmmDataset) -> float:
    """Lambda_N(theta; W1) over the diagonal normal responses"""
    theta.validate()
    theta0.validate()
    _check_dimensions(theta, data.design)
    y = np.diag(data.y1)
    diag = data.design.diagonal
    scale = np.sqrt(1.0 + 2.0 * theta.thetad)
    scale0 = np.sqrt(1.0 + 2.0 * theta0.thetad)
    return float(np.sum(norm.logpdf(y, diag @ theta.beta1, scale)
                        - norm.logpdf(y, diag @ theta0.beta1, scale0)))


def diagonal_success_probs(theta: MglmmParams, design: MglmmDesign,
                           nodes: Optional[int] = None) -> np.ndarray:
    return np.atleast_1d(marginal_success_prob(design.diagonal, theta.beta2, theta.thetad, nodes))


def subcoll_ratio_bernoulli(theta: MglmmParams, theta0: MglmmParams, data: MglmmDataset,
                            nodes: Optional[int] = None) -> float:
    """Lambda_N(theta; W2) over the diagonal binary responses"""
    theta.validate()
    theta0.validate()
    _check_dimensions(theta, data.design)
    probs = diagonal_success_probs(theta, data.design, nodes)
    probs0 = diagonal_success_probs(theta0, data.design, nodes)
    if np.any((probs <= 0) | (probs >= 1)) or np.any((probs0 <= 0) | (probs0 >= 1)):
        raise NumericalError("Marginal success probability evaluated to 0 or 1")
    y = np.diag(data.y2)
    return float(np.sum(y * np.log(probs / probs0) + (1.0 - y) * np.log((1.0 - probs) / (1.0 - probs0))))


def normal_expected_ratio(theta: MglmmParams, theta0: MglmmParams, design: MglmmDesign) -> float:
    """N^-1 E_theta0[Lambda_N(theta; W1)], the average negative normal KL"""
    variance = 1.0 + 2.0 * theta.thetad
    variance0 = 1.0 + 2.0 * theta0.thetad
    shift = design.diagonal @ (theta.beta1 - theta0.beta1)
    terms = np.log(variance / variance0) + (variance0 + shift ** 2) / variance - 1.0
    return float(-0.5 * np.mean(terms))


def bernoulli_expected_ratio(theta: MglmmParams, theta0: MglmmParams, design: MglmmDesign,
                             nodes: Optional[int] = None) -> float:
    """N^-1 E_theta0[Lambda_N(theta; W2)], the average negative Bernoulli KL"""
    probs = diagonal_success_probs(theta, design, nodes)
    probs0 = diagonal_success_probs(theta0, design, nodes)
    return float(-np.mean(bernoulli_kl(probs0, probs)))


def bernoulli_split_bound(theta: MglmmParams, theta0: MglmmParams, design: MglmmDesign,
                          nodes: Optional[int] = None) -> float:
    """
    Upper bound on bernoulli_expected_ratio from Pinsker and the triangle inequality:
    -2 (A - B)^2, A the mean change in p from moving thetad alone, B the mean
    change from moving beta2 alone. Either sign of A - B gives a valid bound.
    """
    moved = diagonal_success_probs(theta, design, nodes)
    at_thetad0 = diagonal_success_probs(MglmmParams(theta.beta1, theta.beta2, theta0.thetad), design, nodes)
    truth = diagonal_success_probs(theta0, design, nodes)
    gap = np.mean(np.abs(moved - at_thetad0)) - np.mean(np.abs(truth - at_thetad0))
    return float(-2.0 * gap ** 2)
