# rates.py
"""Least-squares rate fits and trend rules used by the checks."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from ..errors import ExperimentError


@dataclass
class RateFit:
    xs: List[float]
    ys: List[float]
    slope: float
    intercept: float
    slope_ci: Tuple[float, float]
    axes: str
    passed: Optional[bool] = None
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"xs": self.xs, "ys": self.ys, "slope": self.slope, "intercept": self.intercept,
                "slope_ci": list(self.slope_ci), "axes": self.axes, "passed": self.passed,
                "extra": self.extra}


def fit_rate(xs: Sequence[float], ys: Sequence[float], axes: str, level: float = 0.95) -> RateFit:
    """Ordinary least squares of ys on xs with a t-based slope interval"""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 2 or np.unique(xs).size < 2:
        raise ExperimentError(f"A rate fit needs at least two distinct x values, got {np.unique(xs).size}")
    result = stats.linregress(xs, ys)
    dof = xs.size - 2
    # Two points determine the line exactly; no interval to report
    half = 0.0
    if dof > 0:
        half = stats.t.ppf(0.5 + level / 2.0, dof) * result.stderr if np.isfinite(result.stderr) else np.inf
    return RateFit(xs=[float(v) for v in xs], ys=[float(v) for v in ys], slope=float(result.slope),
                   intercept=float(result.intercept),
                   slope_ci=(float(result.slope - half), float(result.slope + half)), axes=axes)


def decreasing_with_one_inversion(values: Sequence[float], errors: Sequence[float],
                                  sigmas: float = 3.0) -> bool:
    """
    True when the sequence decreases, allowing one increase that stays within
    `sigmas` combined standard errors, and the last value is below the first.
    """
    values = np.asarray(values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    inversions = 0
    for k in range(1, values.size):
        rise = values[k] - values[k - 1]
        if rise > 0:
            allowed = sigmas * np.hypot(errors[k], errors[k - 1])
            if rise > allowed:
                return False
            inversions += 1
    return bool(inversions <= 1 and values[-1] < values[0])


def non_decreasing_within(values: Sequence[float], errors: Sequence[float], sigmas: float = 3.0) -> bool:
    """Every drop is within `sigmas` combined standard errors"""
    values = np.asarray(values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    drops = values[:-1] - values[1:]
    allowed = sigmas * np.hypot(errors[:-1], errors[1:])
    return bool(np.all(drops <= allowed))
