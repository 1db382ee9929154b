# fit.py
"""Maximum-likelihood fitting by multistart quasi-Newton search in unconstrained coordinates."""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import structlog
from scipy.optimize import minimize

from ..errors import ContractError, DomainError, FitError, NumericalError
from ..models.importance import ApproxConfig, full_loglik_mglmm, mglmm_score, mglmm_value_and_score
from ..models.lmm import LmmDataset, lmm_loglik, lmm_score
from ..models.mglmm import MglmmDataset
from ..models.params import LmmParams, MglmmParams, ModelKind, ParamVector, ToyParams
from ..models.streams import stream
from ..models.toy import toy_loglik, toy_score
from .reparam import natural_jacobian, to_natural, to_unconstrained

logger = structlog.get_logger()

POLISH_STEPS = 5
MIN_THETAD_START = 0.05


@dataclass(frozen=True)
class FitConfig:
    starts: int = 8
    grad_tol: float = 1e-6
    max_iter: int = 200
    start_dispersion: float = 0.5
    seed: int = 0
    approx: Optional[ApproxConfig] = None

    def __post_init__(self):
        if self.starts < 1:
            raise ContractError(f"starts must be at least 1, got {self.starts}")
        if not self.grad_tol > 0:
            raise ContractError(f"grad_tol must be positive, got {self.grad_tol}")


@dataclass
class StartRecord:
    index: int
    start: List[float]
    theta: List[float]
    loglik: float
    grad_norm: float
    converged: bool
    iterations: int
    message: str
    trace: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"index": self.index, "start": self.start, "theta": self.theta, "loglik": self.loglik,
                "grad_norm": self.grad_norm, "converged": self.converged,
                "iterations": self.iterations, "message": self.message, "trace": self.trace}


@dataclass
class FitResult:
    theta_hat: ParamVector
    loglik: float
    grad_norm: float
    converged: bool
    starts_summary: List[StartRecord]

    def to_dict(self, verbose: bool = False) -> dict:
        result = {
            "model": self.theta_hat.kind.value,
            "theta_hat": [float(v) for v in self.theta_hat.as_array()],
            "names": list(self.theta_hat.names()),
            "loglik": self.loglik,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "n_starts": len(self.starts_summary),
            "n_converged": sum(record.converged for record in self.starts_summary),
        }
        if verbose:
            result["starts"] = [record.to_dict() for record in self.starts_summary]
        return result


def _require(data, expected, model: ModelKind):
    if not isinstance(data, expected):
        raise ContractError(f"{model.value} model needs {expected.__name__} data, got {type(data).__name__}")


def loglik_and_score(model: ModelKind, theta: ParamVector, data,
                     approx: Optional[ApproxConfig] = None) -> Tuple[float, np.ndarray]:
    """Log-likelihood (or its estimate) and score in natural coordinates"""
    model = ModelKind(model)
    if model is ModelKind.LMM:
        _require(data, LmmDataset, model)
        return lmm_loglik(theta, data), lmm_score(theta, data)
    if model is ModelKind.MGLMM:
        _require(data, MglmmDataset, model)
        estimate, _, score = mglmm_value_and_score(theta, data, approx)
        return estimate, score
    _require(data, np.ndarray, model)
    return toy_loglik(theta, data), toy_score(theta, data)


def score_function(model: ModelKind, data, approx: Optional[ApproxConfig] = None) -> Callable:
    model = ModelKind(model)
    if model is ModelKind.LMM:
        return lambda theta: lmm_score(theta, data)
    if model is ModelKind.MGLMM:
        return lambda theta: mglmm_score(theta, data, approx)
    return lambda theta: toy_score(theta, data)


def initial_theta(model: ModelKind, data) -> ParamVector:
    """Moment-based starting point"""
    model = ModelKind(model)
    if model is ModelKind.LMM:
        _require(data, LmmDataset, model)
        half = data.T // 2
        theta1 = float(np.mean(data.y[..., half:]))
        theta2 = float(np.mean(data.y[..., :half])) - theta1
        share = max(float(np.var(data.y)), 1e-8) / 4.0
        return LmmParams(theta1, theta2, share, share, share, share, 0.0)
    if model is ModelKind.MGLMM:
        _require(data, MglmmDataset, model)
        x = data.design.x.reshape(-1, data.design.p)
        beta1 = np.linalg.lstsq(x, data.y1.ravel(), rcond=None)[0]
        variance = float(np.var(data.y1.ravel() - x @ beta1))
        beta2 = np.linalg.lstsq(x, 4.0 * (data.y2.ravel() - 0.5), rcond=None)[0]
        return MglmmParams(beta1, beta2, max((variance - 1.0) / 2.0, MIN_THETAD_START))
    _require(data, np.ndarray, model)
    return ToyParams(float(np.median(data)))


def start_points(template: ParamVector, cfg: FitConfig) -> List[np.ndarray]:
    """Start k depends only on (seed, k), so a longer list extends a shorter one"""
    center = to_unconstrained(template)
    points = [center]
    for k in range(1, cfg.starts):
        points.append(center + cfg.start_dispersion * stream(cfg.seed, k).standard_normal(center.size))
    return points


class _Objective:
    """Negative log-likelihood in unconstrained coordinates with a value history"""

    def __init__(self, model: ModelKind, template: ParamVector, data, approx):
        self.model = model
        self.template = template
        self.data = data
        self.approx = approx
        self.history: List[float] = []

    def evaluate(self, z: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """(log-likelihood, natural score, unconstrained gradient)"""
        theta = to_natural(self.template, z)
        loglik, score = loglik_and_score(self.model, theta, self.data, self.approx)
        return loglik, score, score * natural_jacobian(theta)

    def __call__(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            loglik, _, gradient = self.evaluate(z)
        except (DomainError, NumericalError):
            return np.inf, np.zeros_like(z)
        self.history.append(-loglik)
        return -loglik, -gradient


def _polish(objective: _Objective, z: np.ndarray, grad_tol: float) -> Tuple[np.ndarray, float, float]:
    """Newton steps on the unconstrained score, kept only when the natural score norm drops"""
    loglik, score, gradient = objective.evaluate(z)
    norm = float(np.linalg.norm(score))
    for _ in range(POLISH_STEPS):
        if norm <= grad_tol:
            break
        jacobian = np.empty((z.size, z.size))
        for k in range(z.size):
            h = 1e-5 * (1.0 + abs(z[k]))
            shift = np.zeros_like(z)
            shift[k] = h
            try:
                jacobian[:, k] = (objective.evaluate(z + shift)[2] - objective.evaluate(z - shift)[2]) / (2 * h)
            except (DomainError, NumericalError):
                return z, loglik, norm
        try:
            step = np.linalg.solve(jacobian, gradient)
        except np.linalg.LinAlgError:
            logger.warning("newton_polish_singular", grad_norm=norm)
            break
        improved = False
        for scale in (1.0, 0.5):
            candidate = z - scale * step
            try:
                c_loglik, c_score, c_gradient = objective.evaluate(candidate)
            except (DomainError, NumericalError):
                continue
            if np.linalg.norm(c_score) < norm:
                z, loglik, score, gradient = candidate, c_loglik, c_score, c_gradient
                norm = float(np.linalg.norm(score))
                improved = True
                break
        if not improved:
            break
    return z, loglik, norm


def _run_start(model: ModelKind, template: ParamVector, data, z0: np.ndarray, index: int,
               cfg: FitConfig) -> StartRecord:
    objective = _Objective(model, template, data, cfg.approx)
    start = [float(v) for v in to_natural(template, z0).as_array()]
    try:
        result = minimize(objective, z0, jac=True, method="BFGS",
                          options={"gtol": cfg.grad_tol, "maxiter": cfg.max_iter, "norm": 2})
        z, loglik, norm = _polish(objective, result.x, cfg.grad_tol)
        theta = to_natural(template, z)
    except (DomainError, NumericalError) as e:
        logger.warning("fit_start_failed", model=model.value, start=index, error=str(e))
        return StartRecord(index=index, start=start, theta=start, loglik=-np.inf, grad_norm=np.inf,
                           converged=False, iterations=0, message=str(e), trace=objective.history)
    converged = bool(np.isfinite(loglik) and norm <= cfg.grad_tol)
    logger.debug("fit_start_complete", model=model.value, start=index, loglik=loglik,
                 grad_norm=norm, converged=converged)
    return StartRecord(index=index, start=start, theta=[float(v) for v in theta.as_array()],
                       loglik=float(loglik), grad_norm=norm, converged=converged,
                       iterations=int(result.nit), message=str(result.message), trace=objective.history)


def select_start(records: List[StartRecord]) -> StartRecord:
    """Best converged start: highest loglik, then lowest grad_norm, then lowest index"""
    converged = [record for record in records if record.converged]
    if not converged:
        best = min(record.grad_norm for record in records)
        raise FitError(f"None of {len(records)} starts reached the gradient tolerance", best)
    return min(converged, key=lambda record: (-record.loglik, record.grad_norm, record.index))


def fit_mle(model: ModelKind, data, cfg: Optional[FitConfig] = None) -> FitResult:
    """
    Multistart maximum-likelihood fit

    Args:
        model: lmm, mglmm or toy
        data: LmmDataset, MglmmDataset or square array (toy)
        cfg: Fit settings
    Returns:
        FitResult for the best converged start, with every start recorded
    Raises:
        FitError: No start reached grad_tol
    """
    model = ModelKind(model)
    cfg = cfg or FitConfig()
    template = initial_theta(model, data)
    records = [_run_start(model, template, data, z0, index, cfg)
               for index, z0 in enumerate(start_points(template, cfg))]
    best = select_start(records)
    theta_hat = template.with_array(best.theta)
    logger.info("fit_complete", model=model.value, loglik=best.loglik, grad_norm=best.grad_norm,
                start=best.index, converged_starts=sum(r.converged for r in records))
    return FitResult(theta_hat=theta_hat, loglik=best.loglik, grad_norm=best.grad_norm,
                     converged=True, starts_summary=records)


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)


def check_gradient(model: ModelKind, theta: ParamVector, data,
                   approx: Optional[ApproxConfig] = None) -> float:
    """Largest relative error between the score and central differences in unconstrained coordinates"""
    model = ModelKind(model)
    theta.validate()
    if model is ModelKind.MGLMM:
        _require(data, MglmmDataset, model)
        value = lambda point: full_loglik_mglmm(point, data, approx)[0]
    else:
        value = lambda point: loglik_and_score(model, point, data)[0]
    analytic = score_function(model, data, approx)(theta) * natural_jacobian(theta)
    z = to_unconstrained(theta)
    numeric = np.empty_like(z)
    for k in range(z.size):
        h = 1e-6 * (1.0 + abs(z[k]))
        shift = np.zeros_like(z)
        shift[k] = h
        numeric[k] = (value(to_natural(theta, z + shift)) - value(to_natural(theta, z - shift))) / (2 * h)
    return float(np.max(relative_error(analytic, numeric)))
