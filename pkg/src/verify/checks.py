# checks.py
"""Monte Carlo and closed-form checks of the subset-argument consistency machinery.

Every check takes a ModelFamily, derives one seed per (size, replication) from
the root seed and fans replications out with joblib. Results come back in
submission order, so reports do not depend on the number of workers.
"""
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import structlog
from joblib import Parallel, delayed

from ..config import configure_logging, get_config
from ..errors import ConfigurationError, ExperimentError, FitError, NumericalError
from ..estimation.fit import FitConfig, check_gradient, fit_mle
from ..models.lmm import Subcollection
from ..models.mglmm import bernoulli_split_bound
from ..models.params import ModelKind, ParamVector
from ..models.streams import derive_seed, replication_seeds
from ..models.toy import ToySubset, fit_toy_subcollection, toy_variance
from .families import IDENTIFYING, BatchEvaluator, ModelFamily
from .rates import RateFit, decreasing_with_one_inversion, fit_rate, non_decreasing_within
from .sphere import SphereGrid, ball_sample, polish_on_sphere
from .subsets import SubsetName, SubsetSpec

logger = structlog.get_logger()

MAX_FAILURE_RATE = 0.05
MEDIAN_SE_FACTOR = math.sqrt(math.pi / 2.0)
ULLN_SLOPE_RANGE = (-0.7, -0.3)
TOY_SLOPE_RANGE = (-0.32, -0.18)


@dataclass
class CheckReport:
    name: str
    model: str
    passed: bool
    details: Dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"check": self.name, "model": self.model, "passed": bool(self.passed),
                "details": self.details, "warnings": self.warnings}


def _call(func: Callable, seed: int):
    if not structlog.is_configured():
        configure_logging()
    return func(seed)


def run_replications(func: Callable, seeds: Sequence[int], workers: Optional[int] = None) -> list:
    """Evaluate func(seed) for every seed, results in seed order"""
    workers = get_config().WORKERS if workers is None else workers
    return Parallel(n_jobs=workers)(delayed(_call)(func, seed) for seed in seeds)


def _binomial_se(fraction: float, reps: int) -> float:
    return math.sqrt(max(fraction * (1.0 - fraction), 0.0) / reps)


def _mean_se(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0


def _finish(report: CheckReport) -> CheckReport:
    logger.info("check_complete", check=report.name, model=report.model, passed=report.passed,
                warnings=len(report.warnings))
    return report


def _grid_points(family: ModelFamily, grid: SphereGrid, spec: SubsetSpec) -> np.ndarray:
    points = grid.points[family.contains(grid.points, spec)]
    if points.shape[0] == 0:
        raise ConfigurationError("grid", f"no grid point lies in {spec.which.value} for epsilon={spec.epsilon}")
    if np.any(np.linalg.norm(points - family.theta0.as_array(), axis=1) == 0):
        raise ConfigurationError("grid", "the subset grid contains theta0")
    return points


# Per-replication workers (module level so joblib can pickle them)

def _full_ratio_replication(family: ModelFamily, theta: ParamVector, N: int, seed: int):
    return family.full_ratio(theta, family.simulate(N, seed))


def _inequality_replication(family: ModelFamily, theta: ParamVector, evaluator: BatchEvaluator,
                            N: int, seed: int):
    data = family.simulate(N, seed)
    full, stderr = family.full_ratio(theta, data)
    return full, stderr, float(evaluator.ratios(data)[0])


def _sup_replication(family: ModelFamily, evaluator: BatchEvaluator, points: np.ndarray,
                     which: Subcollection, N: int, grid: SphereGrid, spec: SubsetSpec,
                     polish: bool, seed: int) -> float:
    data = family.simulate(N, seed)
    values = evaluator.ratios(data)
    k = int(np.argmax(values))
    if not polish:
        return float(values[k])
    objective = lambda candidates: family.batch(candidates, which, N).ratios(data)
    member = lambda candidates: family.contains(candidates, spec)
    return max(float(values[k]), polish_on_sphere(objective, grid, points[k], member))


def _deviation_replication(family: ModelFamily, evaluator: BatchEvaluator, expected: np.ndarray,
                           N: int, seed: int) -> float:
    return float(np.max(np.abs(evaluator.ratios(family.simulate(N, seed)) - expected)) / N)


def _score_replication(family: ModelFamily, ball: np.ndarray, N: int, seed: int):
    data = family.simulate(N, seed)
    norms = [np.linalg.norm(family.full_score(family.params(row), data)) for row in ball]
    return float(np.max(norms)), float(np.linalg.norm(family.full_score(family.theta0, data)))


def _fit_replication(family: ModelFamily, fit_cfg: FitConfig, N: int, seed: int):
    data = family.simulate(N, seed)
    extra = {}
    if family.kind is ModelKind.TOY:
        extra = {subset.value: fit_toy_subcollection(data, subset) for subset in ToySubset}
    try:
        result = fit_mle(family.kind, data, fit_cfg)
    except (FitError, NumericalError) as e:
        logger.warning("replication_fit_failed", model=family.kind.value, N=N, error=str(e))
        return None, extra
    return result.theta_hat.as_array(), extra


def _unit_mean_replication(family: ModelFamily, evaluator: BatchEvaluator, N: int, seed: int) -> float:
    return float(evaluator.ratios(family.simulate(N, seed))[0])


# Checks

def exceedance_check(family: ModelFamily, theta: ParamVector, sizes: Sequence[int], reps: int,
                     seed: int, workers: Optional[int] = None) -> CheckReport:
    """P(L_n(theta; Y) >= 1) at a fixed theta != theta0 should fall with n"""
    theta.validate()
    probabilities, errors = [], []
    for N in sizes:
        family.check_size(N)
        results = run_replications(partial(_full_ratio_replication, family, theta, N),
                                   replication_seeds(seed, reps, N), workers)
        fraction = float(np.mean([value >= 0.0 for value, _ in results]))
        probabilities.append(fraction)
        errors.append(_binomial_se(fraction, reps))
    flat_zero = all(value == 0.0 for value in probabilities)
    passed = flat_zero or decreasing_with_one_inversion(probabilities, errors)
    return _finish(CheckReport("exceedance", family.kind.value, passed, {
        "theta": theta.to_dict()["theta"], "sizes": list(sizes), "probabilities": probabilities,
        "stderr": errors, "reps": reps}))


def subset_inequality_check(family: ModelFamily, theta: ParamVector, c: float, N: int, reps: int,
                            seed: int, which: Subcollection = Subcollection.W1,
                            workers: Optional[int] = None) -> CheckReport:
    """P(L_n >= c) <= E[min(1, L_m / c)] for a subcollection W of the data"""
    theta.validate()
    if not c > 0:
        raise ConfigurationError("c", f"must be positive, got {c}")
    family.check_size(N)
    which = Subcollection(which)
    evaluator = family.batch(theta.as_array()[None, :], which, N)
    results = run_replications(partial(_inequality_replication, family, theta, evaluator, N),
                               replication_seeds(seed, reps, N), workers)
    full = np.array([r[0] for r in results])
    stderr = np.array([r[1] for r in results])
    sub = np.array([r[2] for r in results])
    log_c = math.log(c)
    left = float(np.mean(full >= log_c))
    capped = np.exp(np.minimum(sub - log_c, 0.0))
    right = float(np.mean(capped))
    combined = math.sqrt(_binomial_se(left, reps) ** 2 + np.var(capped, ddof=1) / reps)
    borderline = float(np.mean((stderr > 0) & (np.abs(full - log_c) <= 3.0 * stderr)))
    passed = left <= right + 3.0 * combined + borderline
    return _finish(CheckReport("subset_inequality", family.kind.value, passed, {
        "theta": theta.to_dict()["theta"], "c": c, "N": N, "which": which.value, "reps": reps,
        "left": left, "right": right, "combined_se": combined, "borderline_fraction": borderline}))


def identification_rate(family: ModelFamily, which: Subcollection, spec: SubsetSpec, grid: SphereGrid,
                        sizes: Sequence[int], reps: int, seed: int, polish: bool = True,
                        workers: Optional[int] = None) -> RateFit:
    """Slope of E[log sup_{A_i} L_m(theta; W)] against the block count m"""
    which = Subcollection(which)
    points = _grid_points(family, grid, spec)
    xs, ys, summary = [], [], []
    for N in sizes:
        family.check_size(N)
        evaluator = family.batch(points, which, N)
        sups = np.array(run_replications(
            partial(_sup_replication, family, evaluator, points, which, N, grid, spec, polish),
            replication_seeds(seed, reps, N), workers))
        m = family.block_count(N, which)
        xs.extend([m] * reps)
        ys.extend(sups.tolist())
        summary.append({"N": N, "m": m, "mean": float(sups.mean()), "stderr": _mean_se(sups)})
    fit = fit_rate(xs, ys, axes="log-linear")
    fit.passed = bool(fit.slope_ci[1] < 0)
    fit.extra.update({"check": "identification_rate", "model": family.kind.value, "which": which.value,
                      "subset": spec.to_dict(), "grid_points": int(points.shape[0]), "sizes": summary})
    logger.info("check_complete", check="identification_rate", model=family.kind.value,
                slope=fit.slope, passed=fit.passed)
    return fit


def kl_sup_check(family: ModelFamily, spec: SubsetSpec, grid: SphereGrid, N: int = 16,
                 margin: float = 1e-6) -> CheckReport:
    """sup over grid and A_i of N^-1 E[Lambda_N(theta; W_i)] must be negative"""
    family.check_size(N)
    which = IDENTIFYING[spec.which]
    points = _grid_points(family, grid, spec)
    values = family.batch(points, which, N).expected() / N
    center = float(family.batch(family.theta0.as_array()[None, :], which, N).expected()[0] / N)
    supremum = float(values.max())
    details = {"subset": spec.to_dict(), "which": which.value, "N": N, "sup": supremum,
               "argmax": points[int(np.argmax(values))].tolist(), "grid_points": int(points.shape[0]),
               "value_at_center": center, "margin": margin}
    if family.kind is ModelKind.MGLMM and which is Subcollection.W2:
        design = family.design(N)
        bounds = [bernoulli_split_bound(family.params(row), family.theta0, design, family.nodes)
                  for row in points]
        details["split_bound_sup"] = float(max(bounds))
        details["split_bound_holds"] = bool(np.all(np.asarray(bounds) >= values - 1e-10))
    return _finish(CheckReport("kl_sup", family.kind.value, supremum < -margin, details))


def kl_sup_suite(family: ModelFamily, grid: SphereGrid, N: int = 16) -> List[CheckReport]:
    """kl_sup_check on both subsets; the MGLMM runs at zeta = eps/8 and eps/4"""
    epsilon = grid.radius
    zetas = [epsilon / 8.0, epsilon / 4.0] if family.kind is ModelKind.MGLMM else [None]
    return [kl_sup_check(family, family.subset(name, epsilon, zeta), grid, N)
            for zeta in zetas for name in SubsetName]


def ulln_check(family: ModelFamily, which: Subcollection, spec: SubsetSpec, grid: SphereGrid,
               sizes: Sequence[int], reps: int, seed: int, workers: Optional[int] = None) -> RateFit:
    """E sup N^-1 |Lambda_N - E Lambda_N| over the subset grid should fall with N"""
    which = Subcollection(which)
    points = grid.points[family.contains(grid.points, spec)]
    if points.shape[0] == 0:
        raise ConfigurationError("grid", f"no grid point lies in {spec.which.value}")
    means, errors = [], []
    for N in sizes:
        family.check_size(N)
        evaluator = family.batch(points, which, N)
        deviations = np.array(run_replications(
            partial(_deviation_replication, family, evaluator, evaluator.expected(), N),
            replication_seeds(seed, reps, N), workers))
        means.append(float(deviations.mean()))
        errors.append(_mean_se(deviations))
    warnings = []
    if all(value == 0.0 for value in means):
        fit = RateFit(xs=[float(math.log(N)) for N in sizes], ys=[0.0] * len(sizes), slope=0.0,
                      intercept=0.0, slope_ci=(0.0, 0.0), axes="log-log", passed=True)
    else:
        fit = fit_rate(np.log(sizes), np.log(means), axes="log-log")
        fit.passed = decreasing_with_one_inversion(means, errors)
        if not ULLN_SLOPE_RANGE[0] <= fit.slope <= ULLN_SLOPE_RANGE[1]:
            warnings.append(f"log-log slope {fit.slope:.3f} outside {list(ULLN_SLOPE_RANGE)}")
            logger.warning("ulln_slope_unexpected", model=family.kind.value, slope=fit.slope)
    fit.extra.update({"check": "ulln", "model": family.kind.value, "which": which.value,
                      "subset": spec.to_dict(), "sizes": list(sizes), "means": means, "stderr": errors,
                      "warnings": warnings})
    logger.info("check_complete", check="ulln", model=family.kind.value, passed=fit.passed)
    return fit


def lipschitz_order(family: ModelFamily, epsilon: float, sizes: Sequence[int], reps: int, seed: int,
                    ball_points: int = 200, workers: Optional[int] = None) -> RateFit:
    """Log-log slope of the median sup over a ball of the full-data score norm"""
    ball = ball_sample(family.theta0, epsilon, ball_points, derive_seed(seed, 0))
    medians, center_medians, ns = [], [], []
    for N in sizes:
        family.check_size(N)
        results = run_replications(partial(_score_replication, family, ball, N),
                                   replication_seeds(seed, reps, N), workers)
        medians.append(float(np.median([r[0] for r in results])))
        center_medians.append(float(np.median([r[1] for r in results])))
        ns.append(family.n_of(N))
    fit = fit_rate(np.log(ns), np.log(medians), axes="log-log")
    fit.passed = bool(np.isfinite(fit.slope) and fit.slope <= family.lipschitz_limit)
    fit.extra.update({"check": "lipschitz_order", "model": family.kind.value, "sizes": list(sizes),
                      "n": ns, "median_sup_norm": medians, "median_norm_at_theta0": center_medians,
                      "limit": family.lipschitz_limit, "ball_points": ball_points})
    logger.info("check_complete", check="lipschitz_order", model=family.kind.value,
                slope=fit.slope, passed=fit.passed)
    return fit


def rate_condition_check(lipschitz: Optional[RateFit], ident: Optional[RateFit], grid_exponent: float,
                         m_of_n: Callable[[float], float], model: str = "",
                         ns: Sequence[float] = (1e2, 1e4, 1e6, 1e8), margin: float = 0.1) -> CheckReport:
    """
    K_n delta_n -> 0 and M_n a_n -> 0 for the fitted exponents

    With delta_n = n^-(b + margin), K_n delta_n = O(n^-margin) and
    log(M_n a_n) = (b + margin)(d - 1) log n + slope * m(n).
    """
    if lipschitz is None or ident is None:
        missing = [name for name, fit in (("lipschitz_order", lipschitz), ("identification_rate", ident))
                   if fit is None]
        return _finish(CheckReport("rate_condition", model, False, {
            "explanation": f"needs the fits of {', '.join(missing)} from the same run"}))
    b = lipschitz.slope
    slope = ident.slope
    covering_ok = bool(np.isfinite(b))
    table = [{"n": float(n), "log_K_delta": -margin * math.log(n),
              "log_M_a": (b + margin) * grid_exponent * math.log(n) + slope * m_of_n(n)} for n in ns]
    identification_ok = bool(ident.slope_ci[1] < 0)
    if identification_ok:
        explanation = (f"exp({slope:.4g} m(n)) with m(n) polynomial in n beats n^({(b + margin) * grid_exponent:.4g})")
    else:
        explanation = (f"identification slope interval {list(ident.slope_ci)} does not exclude 0; "
                       f"a polynomial cover n^({(b + margin) * grid_exponent:.4g}) times a non-vanishing "
                       f"rate does not vanish")
    return _finish(CheckReport("rate_condition", model, covering_ok and identification_ok, {
        "b_hat": b, "identification_slope": slope, "identification_slope_ci": list(ident.slope_ci),
        "grid_exponent": grid_exponent, "margin": margin, "K_delta_to_zero": covering_ok,
        "M_a_to_zero": identification_ok, "table": table, "explanation": explanation}))


def consistency_experiment(family: ModelFamily, sizes: Sequence[int], reps: int, epsilons: Sequence[float],
                           fit_cfg: Optional[FitConfig] = None, seed: int = 0,
                           workers: Optional[int] = None) -> CheckReport:
    """Fit the MLE on replicated datasets and track its error as the size grows"""
    fit_cfg = fit_cfg or FitConfig()
    if family.kind is ModelKind.MGLMM and fit_cfg.approx is None:
        fit_cfg = FitConfig(starts=fit_cfg.starts, grad_tol=fit_cfg.grad_tol, max_iter=fit_cfg.max_iter,
                            start_dispersion=fit_cfg.start_dispersion, seed=fit_cfg.seed,
                            approx=family.approx)
    theta0 = family.theta0.as_array()
    rows = []
    for N in sizes:
        family.check_size(N)
        results = run_replications(partial(_fit_replication, family, fit_cfg, N),
                                   replication_seeds(seed, reps, N), workers)
        fits = np.array([estimate for estimate, _ in results if estimate is not None])
        failure_rate = 1.0 - fits.shape[0] / reps
        if failure_rate > MAX_FAILURE_RATE:
            raise ExperimentError(f"Optimizer failed on {failure_rate:.1%} of replications at N={N}")
        errors = np.linalg.norm(fits - theta0, axis=1)
        row = {"N": N, "n": family.n_of(N), "fits": int(fits.shape[0]), "failure_rate": failure_rate,
               "median_error": float(np.median(errors)),
               "median_error_se": float(MEDIAN_SE_FACTOR * np.std(errors, ddof=1) / math.sqrt(errors.size)),
               "rmse": np.sqrt(np.mean((fits - theta0) ** 2, axis=0)).tolist(),
               "coverage": {str(eps): float(np.mean(errors < eps)) for eps in epsilons}}
        if family.kind is ModelKind.TOY:
            row["rmse_exact"] = math.sqrt(toy_variance(N))
            row["rmse_se"] = float(np.std((fits[:, 0] - theta0[0]) ** 2, ddof=1)
                                   / (2.0 * row["rmse"][0] * math.sqrt(fits.shape[0])))
            for subset in ToySubset:
                values = np.array([extra[subset.value] for _, extra in results])
                row[f"rmse_{subset.value}"] = float(np.sqrt(np.mean((values - theta0[0]) ** 2)))
        rows.append(row)
        logger.info("consistency_size_complete", model=family.kind.value, N=N,
                    median_error=row["median_error"])
    medians = [row["median_error"] for row in rows]
    median_ok = decreasing_with_one_inversion(medians, [row["median_error_se"] for row in rows])
    coverage_ok = all(
        non_decreasing_within([row["coverage"][str(eps)] for row in rows],
                              [_binomial_se(row["coverage"][str(eps)], reps) for row in rows])
        for eps in epsilons)
    details = {"sizes": rows, "epsilons": list(epsilons), "reps": reps}
    passed = median_ok and coverage_ok
    if family.kind is ModelKind.TOY:
        fit = fit_rate(np.log([row["n"] for row in rows]), np.log([row["rmse"][0] for row in rows]),
                       axes="log-log")
        details["rmse_slope"] = fit.to_dict()
        passed = passed and TOY_SLOPE_RANGE[0] <= fit.slope <= TOY_SLOPE_RANGE[1]
    return _finish(CheckReport("consistency", family.kind.value, passed, details))


def unit_mean_check(family: ModelFamily, theta: ParamVector, which: Subcollection, N: int, reps: int,
                    seed: int, workers: Optional[int] = None) -> CheckReport:
    """Monte Carlo mean of L_m(theta; W) under theta0 should be 1"""
    theta.validate()
    family.check_size(N)
    which = Subcollection(which)
    evaluator = family.batch(theta.as_array()[None, :], which, N)
    ratios = np.exp(np.array(run_replications(partial(_unit_mean_replication, family, evaluator, N),
                                              replication_seeds(seed, reps, N), workers)))
    mean = float(ratios.mean())
    stderr = _mean_se(ratios)
    return _finish(CheckReport("unit_mean", family.kind.value, abs(mean - 1.0) <= 3.0 * stderr, {
        "theta": theta.to_dict()["theta"], "which": which.value, "N": N, "reps": reps,
        "mean": mean, "stderr": stderr}))


def gradient_check(family: ModelFamily, N: int, count: int = 20, epsilon: float = 0.3,
                   seed: int = 0) -> CheckReport:
    """Largest score-vs-finite-difference error over random interior points"""
    family.check_size(N)
    data = family.simulate(N, derive_seed(seed, 1))
    approx = getattr(family, "approx", None)
    errors = [check_gradient(family.kind, family.params(row), data, approx)
              for row in ball_sample(family.theta0, epsilon, count, derive_seed(seed, 0))]
    worst = float(max(errors))
    return _finish(CheckReport("gradient", family.kind.value, worst <= family.gradient_tol, {
        "N": N, "points": count, "max_rel_err": worst, "tolerance": family.gradient_tol}))
