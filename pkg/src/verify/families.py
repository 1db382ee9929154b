# families.py
"""Strategy objects bundling everything the checks need to know about one model."""
import math
from dataclasses import dataclass, field
from typing import ClassVar, Dict, Optional, Tuple

import numpy as np
from scipy.stats import norm

from ..errors import ConfigurationError
from ..models.importance import ApproxConfig, full_loglik_mglmm, mglmm_score
from ..models.lmm import (LmmDataset, Subcollection, SubcollectionBatch, check_design,
                          extract_subcollection, lmm_loglik_ratio, lmm_score, simulate_lmm)
from ..models.mglmm import MglmmDataset, MglmmDesign, generate_design, simulate_mglmm
from ..models.params import LmmParams, MglmmParams, ModelKind, ParamVector, ToyParams, params_from_list
from ..models.quadrature import bernoulli_kl, marginal_success_prob
from ..models.streams import derive_seed
from ..models.toy import simulate_toy, toy_loglik, toy_score
from .subsets import SubsetName, SubsetSpec, contains

# Subset A_i is identified by subcollection W_i
IDENTIFYING = {SubsetName.A1: Subcollection.W1, SubsetName.A2: Subcollection.W2}


class BatchEvaluator:
    """Lambda_m(theta; W) at a fixed set of points, reusable across datasets of one size"""

    def ratios(self, data) -> np.ndarray:
        raise NotImplementedError

    def expected(self) -> np.ndarray:
        """E_theta0[Lambda_m(theta; W)] at every point"""
        raise NotImplementedError


@dataclass
class ModelFamily:
    theta0: ParamVector
    kind: ClassVar[ModelKind]
    gradient_tol: ClassVar[float]
    lipschitz_limit: ClassVar[float]

    def check_size(self, N: int):
        if int(N) != N or N < 1:
            raise ConfigurationError("sizes", f"sample size must be a positive integer, got {N}")

    def simulate(self, N: int, seed: int, theta: Optional[ParamVector] = None):
        raise NotImplementedError

    def n_of(self, N: int) -> int:
        raise NotImplementedError

    def block_count(self, N: int, which: Subcollection) -> int:
        raise NotImplementedError

    def rate_m(self, n: float) -> float:
        """Number of independent blocks as a function of the total sample size n"""
        raise NotImplementedError

    def full_ratio(self, theta: ParamVector, data) -> Tuple[float, float]:
        """(Lambda_n(theta; Y), Monte Carlo standard error)"""
        raise NotImplementedError

    def full_score(self, theta: ParamVector, data) -> np.ndarray:
        raise NotImplementedError

    def batch(self, points: np.ndarray, which: Subcollection, N: int) -> BatchEvaluator:
        raise NotImplementedError

    def contains(self, points: np.ndarray, spec: SubsetSpec) -> np.ndarray:
        return contains(spec, self.theta0, points)

    def subset(self, which: SubsetName, epsilon: float, zeta: Optional[float] = None) -> SubsetSpec:
        return SubsetSpec(model=self.kind, which=which, epsilon=epsilon, zeta=zeta)

    def params(self, values) -> ParamVector:
        return self.theta0.with_array(values)


class _LmmBatch(BatchEvaluator):
    def __init__(self, family: "LmmFamily", points: np.ndarray, which: Subcollection, N: int):
        self.which = which
        self.count = family.block_count(N, which)
        self.inner = SubcollectionBatch([family.params(row) for row in points], family.theta0,
                                        which, family.time_points(N))

    def ratios(self, data: LmmDataset) -> np.ndarray:
        return self.inner.ratios(extract_subcollection(data, self.which))

    def expected(self) -> np.ndarray:
        return self.count * self.inner.expected


@dataclass
class LmmFamily(ModelFamily):
    T: Optional[int] = 4
    T_exponent: Optional[float] = None
    kind: ClassVar[ModelKind] = ModelKind.LMM
    gradient_tol: ClassVar[float] = 1e-5
    lipschitz_limit: ClassVar[float] = 4.0

    def time_points(self, N: int) -> int:
        """T, or the smallest even T >= max(4, N^k) when T grows with N"""
        if self.T_exponent is None:
            return int(self.T)
        T = max(4, math.ceil(N ** self.T_exponent))
        return T + T % 2

    def check_size(self, N: int):
        check_design(N, self.time_points(N))

    def simulate(self, N: int, seed: int, theta: Optional[ParamVector] = None) -> LmmDataset:
        return simulate_lmm(theta or self.theta0, N, self.time_points(N), seed)

    def n_of(self, N: int) -> int:
        return self.time_points(N) * N * N

    def block_count(self, N: int, which: Subcollection) -> int:
        return N // 2

    def rate_m(self, n: float) -> float:
        if self.T_exponent is None:
            return math.sqrt(n / self.T) / 2.0
        return n ** (1.0 / (2.0 + self.T_exponent)) / 2.0

    def full_ratio(self, theta: LmmParams, data: LmmDataset) -> Tuple[float, float]:
        return lmm_loglik_ratio(theta, self.theta0, data), 0.0

    def full_score(self, theta: LmmParams, data: LmmDataset) -> np.ndarray:
        return lmm_score(theta, data)

    def batch(self, points: np.ndarray, which: Subcollection, N: int) -> BatchEvaluator:
        return _LmmBatch(self, np.atleast_2d(points), Subcollection(which), N)


class _MglmmBatch(BatchEvaluator):
    def __init__(self, family: "MglmmFamily", points: np.ndarray, which: Subcollection, N: int):
        self.which = which
        p = family.p
        diagonal = family.design(N).diagonal
        theta0 = family.theta0
        if which is Subcollection.W1:
            self.means = points[:, :p] @ diagonal.T
            self.scales = np.sqrt(1.0 + 2.0 * points[:, 2 * p])[:, None]
            self.means0 = diagonal @ theta0.beta1
            self.scale0 = math.sqrt(1.0 + 2.0 * theta0.thetad)
        else:
            self.probs = np.array([np.atleast_1d(marginal_success_prob(diagonal, row[p:2 * p], row[2 * p],
                                                                       family.nodes))
                                   for row in points])
            self.probs0 = np.atleast_1d(marginal_success_prob(diagonal, theta0.beta2, theta0.thetad,
                                                              family.nodes))
            self.log_odds_success = np.log(self.probs / self.probs0)
            self.log_odds_failure = np.log((1.0 - self.probs) / (1.0 - self.probs0))

    def ratios(self, data: MglmmDataset) -> np.ndarray:
        if self.which is Subcollection.W1:
            y = np.diag(data.y1)
            terms = norm.logpdf(y, self.means, self.scales) - norm.logpdf(y, self.means0, self.scale0)
            return terms.sum(axis=1)
        y = np.diag(data.y2)
        return self.log_odds_success @ y + self.log_odds_failure @ (1.0 - y)

    def expected(self) -> np.ndarray:
        if self.which is Subcollection.W1:
            variance = self.scales[:, 0] ** 2
            variance0 = self.scale0 ** 2
            terms = np.log(variance / variance0)[:, None] + (variance0 + (self.means - self.means0) ** 2) / variance[:, None] - 1.0
            return -0.5 * terms.sum(axis=1)
        return -np.sum(bernoulli_kl(self.probs0[None, :], self.probs), axis=1)


@dataclass
class MglmmFamily(ModelFamily):
    p: int = 2
    gram_floor: Optional[float] = None
    design_seed: int = 0
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    nodes: Optional[int] = None
    _designs: Dict[int, MglmmDesign] = field(default_factory=dict, repr=False)
    kind: ClassVar[ModelKind] = ModelKind.MGLMM
    gradient_tol: ClassVar[float] = 1e-4
    lipschitz_limit: ClassVar[float] = 1.5

    def __post_init__(self):
        if self.theta0.p != self.p:
            raise ConfigurationError("theta0", f"has p={self.theta0.p}, family has p={self.p}")

    def design(self, N: int) -> MglmmDesign:
        """Design for size N, seeded by (design_seed, N) so every worker builds the same one"""
        if N not in self._designs:
            self._designs[N] = generate_design(N, self.p, derive_seed(self.design_seed, N), self.gram_floor)
        return self._designs[N]

    def simulate(self, N: int, seed: int, theta: Optional[ParamVector] = None) -> MglmmDataset:
        return simulate_mglmm(theta or self.theta0, self.design(N), seed)

    def n_of(self, N: int) -> int:
        return 2 * N * N

    def block_count(self, N: int, which: Subcollection) -> int:
        return N

    def rate_m(self, n: float) -> float:
        return math.sqrt(n / 2.0)

    def full_ratio(self, theta: MglmmParams, data: MglmmDataset) -> Tuple[float, float]:
        if theta == self.theta0:
            return 0.0, 0.0
        estimate, stderr = full_loglik_mglmm(theta, data, self.approx)
        estimate0, stderr0 = full_loglik_mglmm(self.theta0, data, self.approx)
        return estimate - estimate0, math.hypot(stderr, stderr0)

    def full_score(self, theta: MglmmParams, data: MglmmDataset) -> np.ndarray:
        return mglmm_score(theta, data, self.approx)

    def batch(self, points: np.ndarray, which: Subcollection, N: int) -> BatchEvaluator:
        return _MglmmBatch(self, np.atleast_2d(points), Subcollection(which), N)


class _ToyBatch(BatchEvaluator):
    VARIANCE = 3.0

    def __init__(self, family: "ToyFamily", points: np.ndarray, which: Subcollection, N: int):
        self.which = which
        self.means = points[:, 0]
        self.mean0 = family.theta0.theta
        self.count = family.block_count(N, which)

    def ratios(self, data: np.ndarray) -> np.ndarray:
        y = np.diag(data) if self.which is Subcollection.W1 else np.diag(data, k=1)
        shift = self.means - self.mean0
        return (shift * (y.sum() - self.count * self.mean0) - 0.5 * self.count * shift ** 2) / self.VARIANCE

    def expected(self) -> np.ndarray:
        return -0.5 * self.count * (self.means - self.mean0) ** 2 / self.VARIANCE


@dataclass
class ToyFamily(ModelFamily):
    kind: ClassVar[ModelKind] = ModelKind.TOY
    gradient_tol: ClassVar[float] = 1e-6
    lipschitz_limit: ClassVar[float] = 4.0

    def check_size(self, N: int):
        if int(N) != N or N < 2:
            raise ConfigurationError("sizes", f"toy sizes must be integers >= 2, got {N}")

    def simulate(self, N: int, seed: int, theta: Optional[ParamVector] = None) -> np.ndarray:
        return simulate_toy((theta or self.theta0).theta, N, seed)

    def n_of(self, N: int) -> int:
        return N * N

    def block_count(self, N: int, which: Subcollection) -> int:
        return N if Subcollection(which) is Subcollection.W1 else N - 1

    def rate_m(self, n: float) -> float:
        return math.sqrt(n)

    def full_ratio(self, theta: ToyParams, data: np.ndarray) -> Tuple[float, float]:
        return toy_loglik(theta, data) - toy_loglik(self.theta0, data), 0.0

    def full_score(self, theta: ToyParams, data: np.ndarray) -> np.ndarray:
        return toy_score(theta, data)

    def batch(self, points: np.ndarray, which: Subcollection, N: int) -> BatchEvaluator:
        return _ToyBatch(self, np.atleast_2d(points), Subcollection(which), N)


def make_family(model: ModelKind, theta0, **settings) -> ModelFamily:
    """
    Build the family of `model` around theta0

    Args:
        model: lmm, mglmm or toy
        theta0: Parameter object or flat list of natural values
        settings: T / T_exponent (lmm); p, gram_floor, design_seed, samples, approx_seed (mglmm)
    """
    model = ModelKind(model)
    if not isinstance(theta0, ParamVector):
        theta0 = params_from_list(model, theta0)
    theta0.validate()
    if model is ModelKind.LMM:
        return LmmFamily(theta0=theta0, T=settings.get("T", 4), T_exponent=settings.get("T_exponent"))
    if model is ModelKind.MGLMM:
        approx = ApproxConfig(samples=settings.get("samples"), seed=settings.get("approx_seed", 0))
        return MglmmFamily(theta0=theta0, p=theta0.p, gram_floor=settings.get("gram_floor"),
                           design_seed=settings.get("design_seed", 0), approx=approx)
    return ToyFamily(theta0=theta0)
