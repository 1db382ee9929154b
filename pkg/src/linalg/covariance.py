# covariance.py
"""Covariance of the longitudinal crossed LMM and Gaussian kernel evaluation.

Responses are stacked with t fastest, then j, then i:
index(i, j, t) = (i * N + j) * T + t (zero-based). Then

    C = theta3 I + theta4 I_N (x) J_{NT} + theta5 J_N (x) I_N (x) J_T + theta6 I_{N^2} (x) Psi

Rotating the i and j indices with an orthonormal Helmert basis turns every
J_N into N e_0 e_0^T, so C becomes block diagonal with T x T blocks
theta3 I + theta6 Psi + c J_T. The dense path is the oracle; the structured
path must agree with it.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import structlog
from scipy.linalg import cho_solve, helmert, lapack, solve_triangular, toeplitz

from ..config import get_config
from ..errors import ConfigurationError, ContractError, DomainError, NumericalError
from ..models.params import LmmParams

logger = structlog.get_logger()

# Block types in the rotated basis: (a=0, b=0), (a=0, b>0), (a>0, b=0), (a>0, b>0)
BLOCK_TYPES = 4


@dataclass(frozen=True, eq=False)
class Ar1Matrix:
    size: int
    rho: float
    entries: np.ndarray

    def derivative(self) -> np.ndarray:
        """Elementwise derivative of rho^|i-j| with respect to rho"""
        lags = np.abs(np.subtract.outer(np.arange(self.size), np.arange(self.size)))
        return lags * self.rho ** np.maximum(lags - 1, 0)


def ar1_matrix(T: int, rho: float, name: str = "rho") -> Ar1Matrix:
    """First order autoregressive correlation matrix, entries rho^|i-j|"""
    if int(T) != T or T < 1:
        raise ConfigurationError("T", f"must be a positive integer, got {T}")
    if not np.isfinite(rho) or not abs(rho) < 1:
        raise DomainError(name, rho, "not inside (-1, 1)")
    entries = toeplitz(float(rho) ** np.arange(int(T)))
    entries.flags.writeable = False
    return Ar1Matrix(size=int(T), rho=float(rho), entries=entries)


@dataclass(frozen=True, eq=False)
class LmmCovariance:
    N: int
    T: int
    theta3: float
    theta4: float
    theta5: float
    theta6: float
    psi: Ar1Matrix
    materialized: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.T * self.N * self.N

    def to_dense(self) -> np.ndarray:
        if self.materialized is not None:
            return self.materialized
        return _dense_matrix(self.N, self.T, self.theta3, self.theta4, self.theta5,
                             self.theta6, self.psi.entries)


def _check_even(name: str, value: int):
    if int(value) != value or value < 2 or value % 2:
        raise ConfigurationError(name, f"must be a positive even integer, got {value}")


def _dense_matrix(N, T, theta3, theta4, theta5, theta6, psi) -> np.ndarray:
    ones_t = np.ones((T, T))
    matrix = theta3 * np.eye(T * N * N)
    matrix += theta4 * np.kron(np.eye(N), np.ones((N * T, N * T)))
    matrix += theta5 * np.kron(np.kron(np.ones((N, N)), np.eye(N)), ones_t)
    matrix += theta6 * np.kron(np.eye(N * N), psi)
    return matrix


def build_lmm_covariance(theta: LmmParams, N: int, T: int,
                         dense_cap: Optional[int] = None) -> LmmCovariance:
    """C(theta) for an N x N x T design, materialized densely when n <= dense_cap"""
    theta.validate()
    _check_even("N", N)
    _check_even("T", T)
    cap = get_config().DENSE_CAP if dense_cap is None else dense_cap
    psi = ar1_matrix(T, theta.theta7, name="theta7")
    n = T * N * N
    materialized = None
    if n <= cap:
        materialized = _dense_matrix(N, T, theta.theta3, theta.theta4, theta.theta5,
                                     theta.theta6, psi.entries)
        materialized.flags.writeable = False
    return LmmCovariance(N=int(N), T=int(T), theta3=theta.theta3, theta4=theta.theta4,
                         theta5=theta.theta5, theta6=theta.theta6, psi=psi,
                         materialized=materialized)


def dense_kernel(matrix: np.ndarray, residual: np.ndarray) -> Tuple[float, float]:
    """(r^T A^-1 r, log det A) through a Cholesky factorization of a dense PD matrix"""
    matrix = np.asarray(matrix, dtype=float)
    residual = np.asarray(residual, dtype=float).ravel()
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] != residual.size:
        raise ContractError(f"Matrix of shape {matrix.shape} does not match residual of length {residual.size}")
    factor, info = lapack.dpotrf(matrix, lower=1, clean=1)
    if info > 0:
        raise NumericalError("Matrix is not positive definite", pivot=int(info))
    if info < 0:
        raise ContractError(f"Invalid argument {-info} passed to the Cholesky factorization")
    z = solve_triangular(factor, residual, lower=True, check_finite=False)
    return float(z @ z), float(2.0 * np.sum(np.log(np.diag(factor))))


class StructuredFactor:
    """Block-diagonal factorization of C(theta) in the rotated (Helmert) basis"""

    def __init__(self, cov: LmmCovariance):
        self.cov = cov
        N, T = cov.N, cov.T
        self.N, self.T = N, T
        self.basis = helmert(N, full=True)
        self.shifts = np.array([N * (cov.theta4 + cov.theta5), N * cov.theta5, N * cov.theta4, 0.0])
        self.multiplicity = np.array([1, N - 1, N - 1, (N - 1) ** 2], dtype=float)
        row = np.arange(N)
        a_zero = (row == 0)[:, None]
        b_zero = (row == 0)[None, :]
        self.block_type = np.where(a_zero & b_zero, 0,
                                   np.where(a_zero, 1, np.where(b_zero, 2, 3)))
        base = cov.theta3 * np.eye(T) + cov.theta6 * cov.psi.entries
        self.blocks = [base + c * np.ones((T, T)) for c in self.shifts]
        self.factors = []
        for k, block in enumerate(self.blocks):
            factor, info = lapack.dpotrf(block, lower=1, clean=1)
            if info > 0:
                raise NumericalError(f"Block {k} of the rotated covariance is not positive definite",
                                     pivot=int(info))
            self.factors.append(factor)
        self.block_logdet = np.array([2.0 * np.sum(np.log(np.diag(f))) for f in self.factors])

    @property
    def logdet(self) -> float:
        return float(self.multiplicity @ self.block_logdet)

    def rotate(self, vector: np.ndarray) -> np.ndarray:
        cube = np.asarray(vector, dtype=float).reshape(self.N, self.N, self.T)
        return np.einsum("ai,bj,ijt->abt", self.basis, self.basis, cube)

    def unrotate(self, cube: np.ndarray) -> np.ndarray:
        return np.einsum("ai,bj,abt->ijt", self.basis, self.basis, cube).ravel()

    def solve_rotated(self, rotated: np.ndarray) -> np.ndarray:
        out = np.empty_like(rotated)
        for k, factor in enumerate(self.factors):
            mask = self.block_type == k
            if mask.any():
                out[mask] = cho_solve((factor, True), rotated[mask].T, check_finite=False).T
        return out

    def solve(self, residual: np.ndarray) -> np.ndarray:
        return self.unrotate(self.solve_rotated(self.rotate(residual)))

    def quad(self, residual: np.ndarray) -> float:
        rotated = self.rotate(residual)
        return float(np.sum(rotated * self.solve_rotated(rotated)))

    def variance_gradient(self, residual: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Gradient of -1/2 [log det C + r^T C^-1 r] with respect to theta3..theta7

        Returns:
            (alpha, gradient) with alpha = C^-1 r in the original ordering
        """
        N, T = self.N, self.T
        rotated_alpha = self.solve_rotated(self.rotate(residual))
        ones = np.ones((T, T))
        psi = self.cov.psi.entries
        dpsi = self.cov.theta6 * self.cov.psi.derivative()
        inverses = [cho_solve((f, True), np.eye(T), check_finite=False) for f in self.factors]

        def trace(derivs):
            return sum(self.multiplicity[k] * np.sum(inverses[k] * derivs[k]) for k in range(BLOCK_TYPES))

        zero = np.zeros((T, T))
        # Rotated derivative blocks per parameter, indexed by block type
        derivative_blocks = [
            [np.eye(T)] * BLOCK_TYPES,
            [N * ones, zero, N * ones, zero],
            [N * ones, N * ones, zero, zero],
            [psi] * BLOCK_TYPES,
            [dpsi] * BLOCK_TYPES,
        ]
        sums = rotated_alpha.sum(axis=2)
        squares = np.einsum("abt,abt->ab", rotated_alpha, rotated_alpha)
        a_zero = self.block_type <= 1
        b_zero = (self.block_type == 0) | (self.block_type == 2)
        quads = np.array([
            np.sum(squares),
            N * np.sum(sums[b_zero] ** 2),
            N * np.sum(sums[a_zero] ** 2),
            np.einsum("abt,ts,abs->", rotated_alpha, psi, rotated_alpha),
            np.einsum("abt,ts,abs->", rotated_alpha, dpsi, rotated_alpha),
        ])
        traces = np.array([trace(blocks) for blocks in derivative_blocks])
        return self.unrotate(rotated_alpha), 0.5 * (quads - traces)

    def eigenvalue_range(self) -> Tuple[float, float]:
        values = np.concatenate([np.linalg.eigvalsh(block) for block in self.blocks])
        return float(values.min()), float(values.max())


def structured_kernel(cov: LmmCovariance) -> StructuredFactor:
    return StructuredFactor(cov)


def gaussian_kernel(cov: Union[LmmCovariance, np.ndarray], residual: np.ndarray,
                    method: str = "auto") -> Tuple[float, float]:
    """
    Quadratic form and log-determinant of a Gaussian kernel

    Args:
        cov: LMM covariance, or any dense positive definite matrix (oracle mode)
        residual: Vector of length n
        method: "dense", "structured" or "auto" (dense when materialized)
    Returns:
        Tuple of (residual^T C^-1 residual, log det C)
    """
    if isinstance(cov, np.ndarray):
        return dense_kernel(cov, residual)
    residual = np.asarray(residual, dtype=float).ravel()
    if residual.size != cov.n:
        raise ContractError(f"Residual has length {residual.size}, covariance has n={cov.n}")
    if method == "auto":
        method = "dense" if cov.materialized is not None else "structured"
    if method == "dense":
        return dense_kernel(cov.to_dense(), residual)
    if method == "structured":
        factor = StructuredFactor(cov)
        return factor.quad(residual), factor.logdet
    raise ConfigurationError("method", f"unknown kernel method '{method}'")


def extreme_eigenvalues(cov: LmmCovariance) -> Tuple[float, float]:
    """Smallest and largest eigenvalue of C(theta), from the rotated blocks"""
    return StructuredFactor(cov).eigenvalue_range()
