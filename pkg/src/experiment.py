# experiment.py
"""Flat JSON experiment configurations and the pipeline that runs their checks."""
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import structlog

from .config import get_config
from .errors import ConfigurationError, ContractError, DomainError
from .estimation.fit import FitConfig
from .models.lmm import Subcollection
from .models.params import ModelKind
from .models.streams import derive_seed
from .reporting.formatter import rate_fit_report
from .verify import checks
from .verify.families import IDENTIFYING, ModelFamily, make_family
from .verify.sphere import ball_sample, check_interior, grid_growth_exponent, sphere_grid

logger = structlog.get_logger()

# Order in which `run` executes the requested checks
CHECK_ORDER = (
    "exceedance",
    "subset_inequality",
    "kl_sup",
    "grid_growth",
    "identification_rate",
    "ulln",
    "lipschitz_order",
    "rate_condition",
    "consistency",
    "unit_mean",
    "gradient",
)

# Stream below the experiment seed that draws the default test parameters
THETA_STREAM = 1 << 20
SUBSET_OF = {subcollection: subset for subset, subcollection in IDENTIFYING.items()}


@dataclass
class ExperimentConfig:
    model: ModelKind
    sizes: List[int]
    checks: List[str]
    theta0: Optional[List[float]] = None
    reps: int = 100
    epsilon: float = 0.5
    seed: int = 0
    output_dir: str = "results"
    workers: Optional[int] = None
    name: Optional[str] = None
    T: int = 4
    T_exponent: Optional[float] = None
    gram_floor: Optional[float] = None
    design_seed: int = 0
    samples: Optional[int] = None
    approx_seed: int = 0
    delta: Optional[float] = None
    epsilons: Optional[List[float]] = None
    c_values: List[float] = field(default_factory=lambda: [1.0, 2.0])
    thetas: Optional[List[List[float]]] = None
    which: List[str] = field(default_factory=lambda: ["W1", "W2"])
    N: Optional[int] = None
    starts: int = 8
    grad_tol: float = 1e-6
    max_iter: int = 200
    ball_points: int = 200
    lipschitz_sizes: Optional[List[int]] = None
    lipschitz_reps: Optional[int] = None
    polish: bool = True
    gradient_points: int = 20
    growth_deltas: Optional[List[float]] = None

    @classmethod
    def from_dict(cls, raw: Dict, name: Optional[str] = None) -> "ExperimentConfig":
        """
        Validate a raw mapping field by field

        Raises:
            ConfigurationError: Unknown or missing keys, wrong types, odd sizes,
                or a theta0 outside the interior
        """
        if not isinstance(raw, dict):
            raise ConfigurationError("config", "top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(unknown[0], "unknown key")
        for required in ("model", "sizes", "checks"):
            if required not in raw:
                raise ConfigurationError(required, "missing required key")
        values = dict(raw)
        values.setdefault("name", name)
        for key, kind in _FIELD_TYPES.items():
            if key in values and values[key] is not None:
                values[key] = _coerce(key, values[key], kind)
        try:
            values["model"] = ModelKind(values["model"])
        except ValueError:
            raise ConfigurationError("model", f"must be one of {[m.value for m in ModelKind]}")
        cfg = cls(**values)
        cfg._validate()
        return cfg

    def _validate(self):
        if not self.sizes:
            raise ConfigurationError("sizes", "must not be empty")
        bad = [c for c in self.checks if c not in CHECK_ORDER]
        if bad:
            raise ConfigurationError("checks", f"unknown check '{bad[0]}', expected one of {list(CHECK_ORDER)}")
        for which in self.which:
            if which not in (s.value for s in Subcollection):
                raise ConfigurationError("which", f"unknown subcollection '{which}'")
        if self.reps < 2:
            raise ConfigurationError("reps", f"must be at least 2, got {self.reps}")
        if self.theta0 is None:
            self.theta0 = get_config().DEFAULT_THETA0.get(self.model.value)
            if self.theta0 is None:
                raise ConfigurationError("theta0", f"no default for model {self.model.value}")
        try:
            family = self.family()
        except DomainError as e:
            raise ConfigurationError("theta0", str(e))
        for key in ("sizes", "lipschitz_sizes", "N"):
            value = getattr(self, key)
            for N in (value if isinstance(value, list) else [] if value is None else [value]):
                try:
                    family.check_size(N)
                except ConfigurationError as e:
                    raise ConfigurationError(key, str(e))
        for eps in self.epsilon_list():
            try:
                check_interior(family.theta0, eps)
            except DomainError as e:
                raise ConfigurationError("epsilon", str(e))
        if self.growth_deltas is not None and (len(self.growth_deltas) < 2 or min(self.growth_deltas) <= 0):
            raise ConfigurationError("growth_deltas", "needs at least two positive covering radii")
        if self.thetas is not None:
            for row in self.thetas:
                try:
                    family.params(row).validate()
                except (DomainError, ValueError) as e:
                    raise ConfigurationError("thetas", str(e))

    def family(self) -> ModelFamily:
        settings = {"T": self.T, "T_exponent": self.T_exponent, "gram_floor": self.gram_floor,
                    "design_seed": self.design_seed, "samples": self.samples, "approx_seed": self.approx_seed}
        try:
            return make_family(self.model, self.theta0, **settings)
        except ContractError as e:
            raise ConfigurationError("theta0", f"wrong length for model {self.model.value}: {e}")

    def epsilon_list(self) -> List[float]:
        return list(self.epsilons) if self.epsilons else [self.epsilon]

    def effective_seed(self) -> int:
        override = get_config().SEED_OVERRIDE
        return self.seed if override is None else override

    def single_size(self) -> int:
        return self.N if self.N is not None else self.sizes[0]

    def mesh(self, epsilon: float) -> float:
        return self.delta if self.delta is not None else epsilon / 2.0

    def growth_radii(self) -> List[float]:
        if self.growth_deltas is not None:
            return list(self.growth_deltas)
        mesh = self.mesh(self.epsilon)
        return [mesh, mesh / 2.0]


_FIELD_TYPES = {
    "sizes": [int], "checks": [str], "theta0": [float], "reps": int, "epsilon": float, "seed": int,
    "output_dir": str, "workers": int, "name": str, "T": int, "T_exponent": float, "gram_floor": float,
    "design_seed": int, "samples": int, "approx_seed": int, "delta": float, "epsilons": [float],
    "c_values": [float], "thetas": [[float]], "which": [str], "N": int, "starts": int, "grad_tol": float,
    "max_iter": int, "ball_points": int, "lipschitz_sizes": [int], "lipschitz_reps": int, "polish": bool,
    "gradient_points": int, "growth_deltas": [float], "model": str,
}


def _coerce(key: str, value, kind):
    if isinstance(kind, list):
        if not isinstance(value, list):
            raise ConfigurationError(key, f"must be a list, got {type(value).__name__}")
        return [_coerce(key, item, kind[0]) for item in value]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(key, f"must be true or false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigurationError(key, f"must be a {kind.__name__}, got {value!r}")
    if kind is int:
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigurationError(key, f"must be an integer, got {value!r}")
        return value
    if kind is float:
        if not isinstance(value, (int, float)):
            raise ConfigurationError(key, f"must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigurationError(key, f"must be a string, got {value!r}")
    return value


def read_config_json(path) -> Dict:
    """Raw JSON object of an experiment file; syntax errors report the line"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError("config", f"{path} not found")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError("config", f"invalid JSON: {e.msg} (column {e.colno})", line=e.lineno)
    return raw


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate a JSON experiment file"""
    return ExperimentConfig.from_dict(read_config_json(path), name=Path(path).stem)


def check_thetas(cfg: ExperimentConfig, family: ModelFamily) -> List:
    """Configured test parameters, or three uniform draws from the epsilon ball"""
    if cfg.thetas is not None:
        return [family.params(row) for row in cfg.thetas]
    rows = ball_sample(family.theta0, cfg.epsilon, 3, derive_seed(cfg.effective_seed(), THETA_STREAM))
    return [family.params(row) for row in rows]


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> List[Tuple[str, Dict]]:
    """
    Run every requested check in CHECK_ORDER

    Args:
        cfg: Validated experiment configuration
        workers: Pool size override; None uses the config, then SUBSET_MLE_WORKERS
    Returns:
        List of (report name, report document) in execution order
    """
    workers = workers if workers is not None else cfg.workers
    seed = cfg.effective_seed()
    family = cfg.family()
    requested = set(cfg.checks)
    subcollections = [Subcollection(w) for w in cfg.which]
    reports: List[Tuple[str, Dict]] = []
    ident_fits, lipschitz_fit = {}, None
    logger.info("experiment_started", name=cfg.name, model=cfg.model.value, checks=cfg.checks, seed=seed)

    def add(name: str, document: Dict):
        reports.append((name, document))

    def grid_for(epsilon: float):
        return sphere_grid(family.theta0, epsilon, cfg.mesh(epsilon))

    def spec_for(which: Subcollection, epsilon: float):
        return family.subset(SUBSET_OF[which], epsilon)

    for check in CHECK_ORDER:
        if check not in requested:
            continue
        logger.info("check_started", check=check, model=cfg.model.value)
        if check == "exceedance":
            for k, theta in enumerate(check_thetas(cfg, family)):
                report = checks.exceedance_check(family, theta, cfg.sizes, cfg.reps, derive_seed(seed, 0, k), workers)
                add(f"exceedance_{k}", report.to_dict())
        elif check == "subset_inequality":
            for k, theta in enumerate(check_thetas(cfg, family)):
                for l, c in enumerate(cfg.c_values):
                    for which in subcollections:
                        report = checks.subset_inequality_check(family, theta, c, cfg.single_size(), cfg.reps,
                                                                derive_seed(seed, 1, k, l), which, workers)
                        add(f"subset_inequality_{which.value}_{k}_{l}", report.to_dict())
        elif check == "kl_sup":
            for epsilon in cfg.epsilon_list():
                for report in checks.kl_sup_suite(family, grid_for(epsilon), cfg.single_size()):
                    details = report.details
                    suffix = f"{details['subset']['which']}_eps{epsilon:g}"
                    if details["subset"]["zeta"] is not None:
                        suffix += f"_zeta{details['subset']['zeta']:g}"
                    add(f"kl_sup_{suffix}", report.to_dict())
        elif check == "grid_growth":
            growth = grid_growth_exponent(family.theta0, cfg.epsilon, cfg.growth_radii())
            growth.extra.update({"check": "grid_growth", "model": cfg.model.value})
            add("grid_growth", rate_fit_report(growth))
        elif check == "identification_rate":
            grid = grid_for(cfg.epsilon)
            for which in subcollections:
                fit = checks.identification_rate(family, which, spec_for(which, cfg.epsilon), grid, cfg.sizes,
                                                 cfg.reps, derive_seed(seed, 3), cfg.polish, workers)
                ident_fits[which] = fit
                add(f"identification_rate_{which.value}", rate_fit_report(fit))
        elif check == "ulln":
            grid = grid_for(cfg.epsilon)
            for which in subcollections:
                fit = checks.ulln_check(family, which, spec_for(which, cfg.epsilon), grid, cfg.sizes, cfg.reps,
                                        derive_seed(seed, 4), workers)
                add(f"ulln_{which.value}", rate_fit_report(fit))
        elif check == "lipschitz_order":
            lipschitz_fit = checks.lipschitz_order(family, cfg.epsilon, cfg.lipschitz_sizes or cfg.sizes,
                                                   cfg.lipschitz_reps or cfg.reps, derive_seed(seed, 5),
                                                   cfg.ball_points, workers)
            add("lipschitz_order", rate_fit_report(lipschitz_fit))
        elif check == "rate_condition":
            exponent = family.theta0.dimension - 1
            for which in subcollections:
                report = checks.rate_condition_check(lipschitz_fit, ident_fits.get(which), exponent,
                                                     family.rate_m, model=cfg.model.value)
                report.details["which"] = which.value
                add(f"rate_condition_{which.value}", report.to_dict())
        elif check == "consistency":
            fit_cfg = FitConfig(starts=cfg.starts, grad_tol=cfg.grad_tol, max_iter=cfg.max_iter,
                                seed=derive_seed(seed, 7), approx=getattr(family, "approx", None))
            report = checks.consistency_experiment(family, cfg.sizes, cfg.reps, cfg.epsilon_list(), fit_cfg,
                                                   derive_seed(seed, 7), workers)
            add("consistency", report.to_dict())
        elif check == "unit_mean":
            for k, theta in enumerate(check_thetas(cfg, family)):
                for which in subcollections:
                    report = checks.unit_mean_check(family, theta, which, cfg.single_size(), cfg.reps,
                                                    derive_seed(seed, 8, k), workers)
                    add(f"unit_mean_{which.value}_{k}", report.to_dict())
        elif check == "gradient":
            report = checks.gradient_check(family, cfg.single_size(), cfg.gradient_points, cfg.epsilon,
                                           derive_seed(seed, 9))
            add("gradient", report.to_dict())
    logger.info("experiment_complete", name=cfg.name, reports=len(reports),
                failed=sum(not document["passed"] for _, document in reports))
    return reports
