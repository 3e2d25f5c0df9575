"""Tangent-space geometry of the fixed Tucker-rank manifold."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_core import (
    ShapeError,
    TuckerFactors,
    hosvd,
    matricize,
    mode_product,
    multi_mode_product,
)

PINV_RTOL = 1e-12


class DegeneratePointError(ArithmeticError):
    """The core unfolding is rank deficient, so the tangent space is undefined."""


@dataclass(frozen=True)
class TangentVector:
    """Structured tangent vector ``core_dot x [U] + sum_k core x_k arm_k x_{j!=k} U_j``.

    Each ``arms[k]`` has shape ``(d_k, r_k)`` and is orthogonal to ``base.factors[k]``.
    """

    base: TuckerFactors
    core_dot: np.ndarray
    arms: tuple[np.ndarray, ...]

    def dense(self) -> np.ndarray:
        return dense_tangent(self)

    def scaled(self, c: float) -> "TangentVector":
        return TangentVector(self.base, c * self.core_dot, tuple(c * V for V in self.arms))


def zero_tangent(F: TuckerFactors) -> TangentVector:
    return TangentVector(F, np.zeros_like(F.core), tuple(np.zeros_like(U) for U in F.factors))


def core_pinv(core: np.ndarray, k: int) -> np.ndarray:
    """Moore-Penrose inverse of the mode-``k`` core unfolding (shape ``r_k^- x r_k``)."""
    C = matricize(core, k)
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    if s.size == 0 or s[0] == 0.0 or s[-1] < PINV_RTOL * s[0] or s.size < C.shape[0]:
        raise DegeneratePointError(
            f"mode-{k} core unfolding is rank deficient (singular values {s})"
        )
    return (Vt.T / s) @ U.T


def tangent_project(F: TuckerFactors, G: np.ndarray) -> TangentVector:
    """Orthogonal projection of the dense tensor ``G`` onto the tangent space at ``F``."""
    if G.shape != F.dims:
        raise ShapeError(f"gradient of shape {G.shape} at a point of dims {F.dims}")
    if not np.any(G):
        return zero_tangent(F)
    Us = F.factors
    m = F.order
    # partial[k] = G x_{j != k} U_j^T, shared between core_dot and the arms
    partial = [multi_mode_product(G, [U.T for U in Us], skip=k) for k in range(m)]
    core_dot = mode_product(partial[0], Us[0].T, 0)
    arms = []
    for k in range(m):
        Gk = matricize(partial[k], k)  # d_k x r_k^-
        W = Gk @ core_pinv(F.core, k)
        arms.append(W - Us[k] @ (Us[k].T @ W))
    return TangentVector(F, core_dot, tuple(arms))


def dense_tangent(tv: TangentVector) -> np.ndarray:
    Us = tv.base.factors
    out = multi_mode_product(tv.core_dot, Us)
    for k, V in enumerate(tv.arms):
        mats = list(Us)
        mats[k] = V
        out = out + multi_mode_product(tv.base.core, mats)
    return out


def tangent_norm(tv: TangentVector) -> float:
    """Frobenius norm of the dense tangent vector without assembling it.

    The ``m + 1`` components are mutually orthogonal because each arm is
    orthogonal to its factor, so the squared norms add.
    """
    total = float(np.sum(tv.core_dot**2))
    for k, V in enumerate(tv.arms):
        Ck = matricize(tv.base.core, k)
        total += float(np.sum((V.T @ V) * (Ck @ Ck.T)))
    return float(np.sqrt(max(total, 0.0)))


def retract_dense(X: np.ndarray, ranks: Sequence[int]) -> TuckerFactors:
    return hosvd(X, ranks)


def retract_efficient(F: TuckerFactors, tv: TangentVector, eta: float) -> TuckerFactors:
    """Rank-``r`` HOSVD of ``full(F) - eta * dense(tv)`` computed on a ``2r`` core.

    ``[U_k | arm_k] = Q_k R_k`` gives ``X = S x [Q]`` with ``S = S' x_k R_k``,
    where ``S'`` is the block-sparse ``2r`` core of the update. HOSVD of ``S``
    lifted by ``Q_k`` is the HOSVD of ``X`` because each ``Q_k`` is orthonormal.
    """
    if eta == 0.0:
        return F
    m = F.order
    ranks = F.ranks
    blocks = []
    Qs = []
    for k in range(m):
        Q, R = np.linalg.qr(np.hstack([F.factors[k], tv.arms[k]]))
        Qs.append(Q)
        blocks.append(R)
    big = np.zeros(tuple(2 * r for r in ranks))
    head = tuple(slice(0, r) for r in ranks)
    big[head] = F.core - eta * tv.core_dot
    for k in range(m):
        idx = list(head)
        idx[k] = slice(ranks[k], 2 * ranks[k])
        big[tuple(idx)] = -eta * F.core
    small = multi_mode_product(big, blocks)
    H = hosvd(small, ranks)
    return TuckerFactors(H.core, tuple(Q @ W for Q, W in zip(Qs, H.factors)))


@dataclass(frozen=True)
class StepSchedule:
    """Two-phase step sizes: ``eta0 * q**l`` in phase one, ``eta_const`` in phase two.

    ``switch_at`` fixes the phase-one length; when ``None`` the solver decides
    from the projected-gradient norms and losses over ``window`` iterations
    (see :class:`~robust_tucker.solvers.SolverConfig`). ``eta0``/``eta_const``
    of ``None`` are resolved by the solver from the data.
    """

    eta0: float | None = None
    q: float = 0.93
    eta_const: float | None = None
    switch_at: int | None = None
    window: int = 10
    stall_tol: float = 1e-3

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError(f"decay q must lie in (0, 1), got {self.q}")
        if self.eta0 is not None and not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if self.eta_const is not None and not self.eta_const > 0:
            raise ValueError("eta_const must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def step_at(sched: StepSchedule, l: int, phase: int) -> float:
    if l < 0:
        raise ValueError("iteration index must be >= 0")
    if phase == 1:
        if sched.eta0 is None:
            raise ValueError("eta0 unresolved")
        return sched.eta0 * sched.q**l
    if phase == 2:
        if sched.eta_const is None:
            raise ValueError("eta_const unresolved")
        return sched.eta_const
    raise ValueError(f"phase must be 1 or 2, got {phase}")
