# errors.py
from typing import Optional, Sequence


class SubsetMleError(Exception):
    """Base class for every error raised by the package"""


class DomainError(SubsetMleError, ValueError):
    """A parameter lies outside the open parameter set"""

    def __init__(self, parameter: str, value, reason: str = "outside the parameter set"):
        self.parameter = parameter
        self.value = value
        super().__init__(f"Parameter '{parameter}'={value!r} is {reason}")


class ConfigurationError(SubsetMleError, ValueError):
    """Invalid dimensions, design or experiment configuration"""

    def __init__(self, field: str, message: str, line: Optional[int] = None):
        self.field = field
        self.line = line
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{field}{location}: {message}")


class ContractError(SubsetMleError, ValueError):
    """Arguments do not fit together (shape or dimension mismatch)"""


class NumericalError(SubsetMleError, ArithmeticError):
    """A factorization or iterative solve failed"""

    def __init__(self, message: str, pivot: Optional[int] = None,
                 trace: Optional[Sequence[float]] = None):
        self.pivot = pivot
        self.trace = list(trace) if trace is not None else None
        detail = ""
        if pivot is not None:
            detail += f" (failing pivot {pivot})"
        if self.trace:
            detail += f" (gradient norms: first={self.trace[0]:.3g}, last={self.trace[-1]:.3g}, iterations={len(self.trace)})"
        super().__init__(message + detail)


class FitError(SubsetMleError, RuntimeError):
    """No multistart start reached the gradient tolerance"""

    def __init__(self, message: str, best_grad_norm: float):
        self.best_grad_norm = best_grad_norm
        super().__init__(f"{message} (best grad_norm={best_grad_norm:.3g})")


class ExperimentError(SubsetMleError, RuntimeError):
    """An experiment could not produce a trustworthy result"""
