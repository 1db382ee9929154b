# sphere.py
"""Covers of the sphere of radius epsilon around theta0.

Grid points are scrambled Sobol points mapped through the normal quantile and
projected radially, so they are deterministic and nested: doubling M keeps the
first M points.
"""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import structlog
from scipy.spatial import cKDTree
from scipy.special import ndtri
from scipy.stats import qmc

from ..errors import ConfigurationError, DomainError
from ..models.params import ParamVector
from ..models.streams import stream
from .rates import RateFit, fit_rate

logger = structlog.get_logger()

GRID_SEED = 20240101
WITNESS_SEED = 7
WITNESSES = 10_000
MAX_POINTS = 1 << 17
MIN_LOG2_POINTS = 3


@dataclass(frozen=True, eq=False)
class SphereGrid:
    center: ParamVector
    radius: float
    points: np.ndarray
    mesh: float

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def params(self, mask: Optional[np.ndarray] = None):
        points = self.points if mask is None else self.points[mask]
        return [self.center.with_array(row) for row in points]


def check_interior(theta0: ParamVector, epsilon: float):
    """The closed ball B_epsilon(theta0) must stay inside the open parameter set"""
    if not epsilon > 0:
        raise DomainError("epsilon", epsilon, "not strictly positive")
    theta0.validate()
    values = theta0.as_array()
    names = theta0.names()
    for k in theta0.positive_indices():
        if not epsilon < values[k]:
            raise DomainError(names[k], float(values[k] - epsilon), f"reached by the ball of radius {epsilon}")
    for k in theta0.correlation_indices():
        if not epsilon < 1.0 - abs(values[k]):
            raise DomainError(names[k], float(values[k]), f"within {epsilon} of the correlation boundary")


def project(center: np.ndarray, radius: float, points: np.ndarray) -> np.ndarray:
    offsets = np.atleast_2d(points) - center
    return center + radius * offsets / np.linalg.norm(offsets, axis=1, keepdims=True)


def unit_directions(count: int, dimension: int, rng: np.random.Generator) -> np.ndarray:
    directions = rng.standard_normal((count, dimension))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def sphere_grid(theta0: ParamVector, epsilon: float, delta: float,
                max_points: int = MAX_POINTS, witnesses: int = WITNESSES) -> SphereGrid:
    """
    Smallest nested Sobol grid on the sphere whose delta-balls contain every witness point

    Raises:
        DomainError: The ball of radius epsilon leaves the parameter set
        ConfigurationError: delta needs more than max_points points
    """
    check_interior(theta0, epsilon)
    if not delta > 0:
        raise ConfigurationError("delta", f"must be positive, got {delta}")
    center = theta0.as_array()
    d = center.size
    if d == 1:
        points = center + epsilon * np.array([[-1.0], [1.0]])
        return SphereGrid(center=theta0, radius=epsilon, points=points, mesh=float(delta))
    witness_points = center + epsilon * unit_directions(witnesses, d, stream(WITNESS_SEED))
    sampler = qmc.Sobol(d, scramble=True, seed=GRID_SEED)
    base = np.empty((0, d))
    log2_points = MIN_LOG2_POINTS
    while (1 << log2_points) <= max_points:
        base = np.vstack([base, sampler.random((1 << log2_points) - base.shape[0])])
        normals = ndtri(np.clip(base, 1e-12, 1.0 - 1e-12))
        points = center + epsilon * normals / np.linalg.norm(normals, axis=1, keepdims=True)
        distance, _ = cKDTree(points).query(witness_points)
        if distance.max() <= delta:
            logger.debug("sphere_grid_built", dimension=d, epsilon=epsilon, delta=delta, count=points.shape[0])
            return SphereGrid(center=theta0, radius=float(epsilon), points=points, mesh=float(delta))
        log2_points += 1
    raise ConfigurationError("delta", f"covering radius {delta} needs more than {max_points} points in dimension {d}")


def grid_growth_exponent(theta0: ParamVector, epsilon: float, deltas: Sequence[float],
                         max_points: int = MAX_POINTS) -> RateFit:
    """Fit log M against log(epsilon / delta); the cover argument needs slope <= d - 1"""
    counts = [sphere_grid(theta0, epsilon, delta, max_points=max_points).count for delta in deltas]
    fit = fit_rate(np.log(epsilon / np.asarray(deltas, dtype=float)), np.log(counts), axes="log-log")
    limit = theta0.dimension - 1 + 0.5
    fit.passed = bool(fit.slope <= limit)
    fit.extra.update({"deltas": [float(v) for v in deltas], "counts": counts, "limit": limit})
    return fit


def ball_sample(theta0: ParamVector, epsilon: float, count: int, seed: int) -> np.ndarray:
    """Uniform points in the closed ball B_epsilon(theta0)"""
    check_interior(theta0, epsilon)
    center = theta0.as_array()
    rng = stream(seed)
    directions = unit_directions(count, center.size, rng)
    radius = epsilon * rng.random(count) ** (1.0 / center.size)
    return center + directions * radius[:, None]


def polish_on_sphere(objective: Callable[[np.ndarray], np.ndarray], grid: SphereGrid,
                     start: np.ndarray, member: Callable[[np.ndarray], np.ndarray],
                     rounds: int = 2) -> float:
    """
    Coordinate search on the sphere from the best grid point

    Args:
        objective: Maps points (M, d) to values (M,)
        grid: Grid supplying center, radius and step size
        start: Best grid point
        member: Maps points (M, d) to a boolean subset mask
        rounds: Number of step sizes tried (mesh/2, mesh/4, ...)
    Returns:
        Best value found (never below the value at start)
    """
    center = grid.center.as_array()
    current = np.asarray(start, dtype=float)
    best = float(objective(current[None, :])[0])
    step = grid.mesh / 2.0
    d = center.size
    for _ in range(rounds):
        moves = np.concatenate([np.eye(d), -np.eye(d)]) * step
        candidates = project(center, grid.radius, current + moves)
        candidates = candidates[member(candidates)]
        if candidates.shape[0]:
            values = objective(candidates)
            k = int(np.argmax(values))
            if values[k] > best:
                best = float(values[k])
                current = candidates[k]
        step /= 2.0
    return best
