# subsets.py
"""Subsets A1, A2 of the sphere and the subcollection that identifies each."""
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ..errors import ConfigurationError
from ..models.params import ModelKind, ParamVector


class SubsetName(str, Enum):
    A1 = "A1"
    A2 = "A2"


@dataclass(frozen=True)
class SubsetSpec:
    model: ModelKind
    which: SubsetName
    epsilon: float
    zeta: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "model", ModelKind(self.model))
        object.__setattr__(self, "which", SubsetName(self.which))
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon", f"must be positive, got {self.epsilon}")
        if self.model is ModelKind.MGLMM and self.zeta is None:
            object.__setattr__(self, "zeta", self.epsilon / 4.0)

    def to_dict(self) -> dict:
        return {"model": self.model.value, "which": self.which.value,
                "epsilon": self.epsilon, "zeta": self.zeta}


def contains(spec: SubsetSpec, theta0: ParamVector, points: np.ndarray) -> np.ndarray:
    """
    Membership mask of sphere points

    LMM: A1 = {||d(theta1, theta2)|| >= eps/2}, A2 = {||d(theta1, theta2)|| <= eps/2}.
    MGLMM: A2 = {|d thetad| <= zeta} & {||d beta2|| >= eps/2}, A1 the closure of its complement.
    Toy: both subsets are the whole sphere.
    """
    offsets = np.atleast_2d(points) - theta0.as_array()
    half = spec.epsilon / 2.0
    if spec.model is ModelKind.LMM:
        mean_shift = np.linalg.norm(offsets[:, :2], axis=1)
        return mean_shift >= half if spec.which is SubsetName.A1 else mean_shift <= half
    if spec.model is ModelKind.MGLMM:
        p = (offsets.shape[1] - 1) // 2
        thetad_shift = np.abs(offsets[:, 2 * p])
        beta2_shift = np.linalg.norm(offsets[:, p:2 * p], axis=1)
        if spec.which is SubsetName.A2:
            return (thetad_shift <= spec.zeta) & (beta2_shift >= half)
        return (thetad_shift >= spec.zeta) | (beta2_shift <= half)
    return np.ones(offsets.shape[0], dtype=bool)
