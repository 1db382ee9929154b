# reparam.py
"""Unconstrained coordinates: log for variances, atanh for correlations."""
from enum import Enum

import numpy as np

from ..errors import DomainError
from ..models.params import ParamVector


class Direction(str, Enum):
    TO_UNCONSTRAINED = "to_unconstrained"
    TO_NATURAL = "to_natural"


def to_unconstrained(theta: ParamVector) -> np.ndarray:
    values = theta.validate().as_array()
    z = values.copy()
    positive = list(theta.positive_indices())
    correlation = list(theta.correlation_indices())
    z[positive] = np.log(values[positive])
    z[correlation] = np.arctanh(values[correlation])
    return z


def to_natural(template: ParamVector, z) -> ParamVector:
    """Natural parameter object of the same model as `template` at unconstrained point z"""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.isfinite(z))[0])
        raise DomainError(template.names()[bad], float(z[bad]), "not finite in unconstrained coordinates")
    values = z.copy()
    positive = list(template.positive_indices())
    correlation = list(template.correlation_indices())
    values[positive] = np.exp(z[positive])
    values[correlation] = np.tanh(z[correlation])
    return template.with_array(values).validate()


def natural_jacobian(theta: ParamVector) -> np.ndarray:
    """Diagonal of d theta / d z at theta"""
    values = theta.as_array()
    jacobian = np.ones_like(values)
    positive = list(theta.positive_indices())
    correlation = list(theta.correlation_indices())
    jacobian[positive] = values[positive]
    jacobian[correlation] = 1.0 - values[correlation] ** 2
    return jacobian


def reparameterize(theta: ParamVector, direction: Direction) -> ParamVector:
    """
    Map a parameter object between natural and unconstrained coordinates

    The unconstrained image is carried in the same parameter class; it is only
    meaningful as input to the reverse mapping.
    """
    if Direction(direction) is Direction.TO_UNCONSTRAINED:
        return theta.with_array(to_unconstrained(theta))
    return to_natural(theta, theta.as_array())
