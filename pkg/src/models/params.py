# params.py
"""Parameter vectors for the three model families.

Every parameter class stores natural-scale values and knows which coordinates
are variances (open half-line) and which are correlations (open interval
(-1, 1)). Boundary values are rejected, never clamped.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Tuple

import numpy as np

from ..errors import ContractError, DomainError


class ModelKind(str, Enum):
    LMM = "lmm"
    MGLMM = "mglmm"
    TOY = "toy"


class ParamVector:
    """Shared behaviour of the parameter classes"""

    kind: ModelKind

    def as_array(self) -> np.ndarray:
        raise NotImplementedError

    def with_array(self, values: Sequence[float]) -> "ParamVector":
        raise NotImplementedError

    def names(self) -> Tuple[str, ...]:
        raise NotImplementedError

    def positive_indices(self) -> Tuple[int, ...]:
        return ()

    def correlation_indices(self) -> Tuple[int, ...]:
        return ()

    @property
    def dimension(self) -> int:
        return self.as_array().size

    def is_interior(self) -> bool:
        try:
            self.validate()
        except DomainError:
            return False
        return True

    def validate(self) -> "ParamVector":
        values = self.as_array()
        names = self.names()
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise DomainError(names[bad], float(values[bad]), "not finite")
        for k in self.positive_indices():
            if not values[k] > 0:
                raise DomainError(names[k], float(values[k]), "not strictly positive")
        for k in self.correlation_indices():
            if not abs(values[k]) < 1:
                raise DomainError(names[k], float(values[k]), "not inside (-1, 1)")
        return self

    def to_dict(self) -> dict:
        return {"model": self.kind.value, "theta": [float(v) for v in self.as_array()]}


@dataclass(frozen=True)
class LmmParams(ParamVector):
    """theta1 baseline mean, theta2 treatment effect, theta3..theta6 variances, theta7 AR(1) correlation"""

    theta1: float
    theta2: float
    theta3: float
    theta4: float
    theta5: float
    theta6: float
    theta7: float
    kind: ModelKind = field(default=ModelKind.LMM, init=False, repr=False)

    NAMES = ("theta1", "theta2", "theta3", "theta4", "theta5", "theta6", "theta7")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "LmmParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.size != 7:
            raise ContractError(f"LMM parameter vector needs 7 entries, got {values.size}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4,
                         self.theta5, self.theta6, self.theta7])

    def with_array(self, values: Sequence[float]) -> "LmmParams":
        return LmmParams.from_array(values)

    def names(self) -> Tuple[str, ...]:
        return self.NAMES

    def positive_indices(self) -> Tuple[int, ...]:
        return (2, 3, 4, 5)

    def correlation_indices(self) -> Tuple[int, ...]:
        return (6,)

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])


@dataclass(frozen=True, eq=False)
class MglmmParams(ParamVector):
    """beta1 (normal responses), beta2 (binary responses), shared random-effect variance thetad"""

    beta1: np.ndarray
    beta2: np.ndarray
    thetad: float
    kind: ModelKind = field(default=ModelKind.MGLMM, init=False, repr=False)

    def __post_init__(self):
        beta1 = np.array(self.beta1, dtype=float).ravel()
        beta2 = np.array(self.beta2, dtype=float).ravel()
        if beta1.size != beta2.size or beta1.size == 0:
            raise ContractError(
                f"beta1 and beta2 must share a positive length, got {beta1.size} and {beta2.size}")
        beta1.flags.writeable = False
        beta2.flags.writeable = False
        object.__setattr__(self, "beta1", beta1)
        object.__setattr__(self, "beta2", beta2)
        object.__setattr__(self, "thetad", float(self.thetad))

    @property
    def p(self) -> int:
        return self.beta1.size

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "MglmmParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.size < 3 or values.size % 2 == 0:
            raise ContractError(f"MGLMM parameter vector needs 2p+1 entries, got {values.size}")
        p = (values.size - 1) // 2
        return cls(values[:p], values[p:2 * p], float(values[-1]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beta1, self.beta2, [self.thetad]])

    def with_array(self, values: Sequence[float]) -> "MglmmParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.size != 2 * self.p + 1:
            raise ContractError(f"Expected {2 * self.p + 1} entries, got {values.size}")
        return MglmmParams.from_array(values)

    def names(self) -> Tuple[str, ...]:
        return (tuple(f"beta1[{k}]" for k in range(self.p))
                + tuple(f"beta2[{k}]" for k in range(self.p)) + ("thetad",))

    def positive_indices(self) -> Tuple[int, ...]:
        return (2 * self.p,)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MglmmParams)
                and np.array_equal(self.as_array(), other.as_array()))

    def __hash__(self) -> int:
        return hash(self.as_array().tobytes())


@dataclass(frozen=True)
class ToyParams(ParamVector):
    """Common mean of the crossed toy model (all variance components fixed at 1)"""

    theta: float
    kind: ModelKind = field(default=ModelKind.TOY, init=False, repr=False)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ToyParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.size != 1:
            raise ContractError(f"Toy parameter vector needs 1 entry, got {values.size}")
        return cls(float(values[0]))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta])

    def with_array(self, values: Sequence[float]) -> "ToyParams":
        return ToyParams.from_array(values)

    def names(self) -> Tuple[str, ...]:
        return ("theta",)


def params_from_list(model: ModelKind, values: Sequence[float]) -> ParamVector:
    """Build the parameter object of a model from a flat list"""
    model = ModelKind(model)
    if model is ModelKind.LMM:
        return LmmParams.from_array(values)
    if model is ModelKind.MGLMM:
        return MglmmParams.from_array(values)
    return ToyParams.from_array(values)


def distance(theta: ParamVector, other: ParamVector) -> float:
    """Euclidean distance between two parameter vectors of the same model"""
    a, b = theta.as_array(), other.as_array()
    if a.shape != b.shape:
        raise ContractError(f"Cannot compare parameter vectors of sizes {a.size} and {b.size}")
    return float(np.linalg.norm(a - b))
