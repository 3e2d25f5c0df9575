"""Entrywise losses and their (sub-)gradients.

The quantile loss at level 1/2 is evaluated as the plain absolute loss
``|x|`` rather than ``|x|/2``; the factor of two is absorbed by the step
sizes. At the kink the sub-gradient element 0 is returned.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class LossKind(str, enum.Enum):
    SQUARE = "square"
    PSEUDO_HUBER = "pseudohuber"
    QUANTILE = "quantile"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    delta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.PSEUDO_HUBER and not self.delta > 0:
            raise ValueError(f"pseudo-Huber needs delta > 0, got {self.delta}")
        if self.kind is LossKind.QUANTILE and not 0 < self.delta < 1:
            raise ValueError(f"quantile level must lie in (0, 1), got {self.delta}")

    @property
    def is_absolute(self) -> bool:
        return self.kind is LossKind.QUANTILE and self.delta == 0.5

    @classmethod
    def square(cls) -> "LossSpec":
        return cls(LossKind.SQUARE, 0.0)

    @classmethod
    def pseudo_huber(cls, delta: float) -> "LossSpec":
        return cls(LossKind.PSEUDO_HUBER, delta)

    @classmethod
    def absolute(cls) -> "LossSpec":
        return cls(LossKind.QUANTILE, 0.5)

    def __str__(self) -> str:
        if self.kind is LossKind.SQUARE:
            return "square"
        return f"{self.kind.value}({self.delta:g})"


def rho(spec: LossSpec, x):
    """Loss evaluated entrywise; returns a float for scalar input."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind is LossKind.SQUARE:
        out = x * x
    elif spec.kind is LossKind.PSEUDO_HUBER:
        out = np.hypot(x, spec.delta)
    elif spec.is_absolute:
        out = np.abs(x)
    else:
        out = np.where(x >= 0, spec.delta * x, (spec.delta - 1.0) * x)
    return float(out) if out.ndim == 0 else out


def drho(spec: LossSpec, x):
    """Derivative (or the chosen sub-gradient element) of :func:`rho`."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind is LossKind.SQUARE:
        out = 2.0 * x
    elif spec.kind is LossKind.PSEUDO_HUBER:
        out = x / np.hypot(x, spec.delta)
    elif spec.is_absolute:
        out = np.sign(x)
    else:
        out = np.where(x > 0, spec.delta, np.where(x < 0, spec.delta - 1.0, 0.0))
    return float(out) if out.ndim == 0 else out


def _check_same_shape(T: np.ndarray, Y: np.ndarray) -> None:
    if T.shape != Y.shape:
        raise ValueError(f"dimension mismatch: {T.shape} vs {Y.shape}")


def loss_value(T: np.ndarray, Y: np.ndarray, spec: LossSpec) -> float:
    _check_same_shape(T, Y)
    return float(np.sum(rho(spec, T - Y)))


def vanilla_gradient(T: np.ndarray, Y: np.ndarray, spec: LossSpec) -> np.ndarray:
    _check_same_shape(T, Y)
    return np.asarray(drho(spec, T - Y))
