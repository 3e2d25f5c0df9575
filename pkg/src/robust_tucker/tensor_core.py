"""Dense tensor algebra for Tucker-format computations.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 stored in C
order, so the last index varies fastest in the flat value buffer.

Matricization convention: ``matricize(T, k)`` has rows indexed by mode ``k``
and columns enumerating the remaining modes in their original order with the
last one varying fastest. ``kron_others`` uses the matching Kronecker order,
so that ``M_k(C x [U_1..U_m]) = U_k @ M_k(C) @ kron_others(U, k).T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor, matrix or rank shapes are inconsistent."""


def as_tensor(values, dims: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``values`` into a validated float64 tensor of order >= 2."""
    arr = np.array(values, dtype=np.float64, order="C")
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"{arr.size} values cannot fill dims {dims}")
        arr = arr.reshape(dims)
    if arr.ndim < 2:
        raise ShapeError(f"tensor order must be >= 2, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimensions must be positive, got {arr.shape}")
    return arr


def _check_mode(ndim: int, k: int) -> int:
    if not 0 <= k < ndim:
        raise ShapeError(f"mode {k} out of range for order-{ndim} tensor")
    return k


def matricize(T: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` unfolding, shape ``(d_k, d*/d_k)``."""
    _check_mode(T.ndim, k)
    return np.moveaxis(T, k, 0).reshape(T.shape[k], -1)


def tensorize(M: np.ndarray, k: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize` for the given target ``dims``."""
    dims = tuple(int(d) for d in dims)
    _check_mode(len(dims), k)
    rest = dims[:k] + dims[k + 1 :]
    expected = (dims[k], int(np.prod(rest)))
    if M.shape != expected:
        raise ShapeError(f"matrix of shape {M.shape} does not fold into {dims} at mode {k}")
    return np.moveaxis(np.asarray(M, dtype=np.float64).reshape((dims[k],) + rest), 0, k)


def mode_product(T: np.ndarray, A: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` product ``T x_k A`` with ``A`` of shape ``(p, d_k)``.

    The result has mode-``k`` size ``p`` and satisfies
    ``matricize(result, k) == A @ matricize(T, k)``. The usual ``T x_k U^T``
    projection onto a factor ``U`` is ``mode_product(T, U.T, k)``.
    """
    _check_mode(T.ndim, k)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != T.shape[k]:
        raise ShapeError(f"matrix of shape {A.shape} incompatible with mode {k} of size {T.shape[k]}")
    return np.moveaxis(np.tensordot(A, T, axes=(1, k)), 0, k)


def multi_mode_product(T: np.ndarray, mats: Sequence[np.ndarray | None], skip: int | None = None) -> np.ndarray:
    """Apply ``mode_product`` for every mode with a non-``None`` matrix."""
    out = T
    for k, A in enumerate(mats):
        if A is None or k == skip:
            continue
        out = mode_product(out, A, k)
    return out


@dataclass(frozen=True)
class TuckerFactors:
    """Tucker representation ``core x_1 U_1 ... x_m U_m``.

    ``factors[k]`` has shape ``(d_k, r_k)`` with orthonormal columns.
    """

    core: np.ndarray
    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "core", np.asarray(self.core, dtype=np.float64))
        object.__setattr__(self, "factors", tuple(np.asarray(U, dtype=np.float64) for U in self.factors))
        if self.core.ndim != len(self.factors):
            raise ShapeError(f"core of order {self.core.ndim} with {len(self.factors)} factors")
        for k, U in enumerate(self.factors):
            if U.ndim != 2 or U.shape[1] != self.core.shape[k]:
                raise ShapeError(f"factor {k} of shape {U.shape} does not match core mode size {self.core.shape[k]}")
            if U.shape[1] > U.shape[0]:
                raise ShapeError(f"factor {k} has rank {U.shape[1]} > dimension {U.shape[0]}")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(U.shape[0] for U in self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(self.core.shape)

    @property
    def order(self) -> int:
        return len(self.factors)

    def orthonormality_error(self) -> float:
        return max(float(np.max(np.abs(U.T @ U - np.eye(U.shape[1])))) for U in self.factors)

    def full(self) -> np.ndarray:
        return tucker_reconstruct(self)


def kron_others(factors: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Kronecker product of all factors except ``k``, in increasing mode order."""
    _check_mode(len(factors), k)
    others = [np.asarray(U, dtype=np.float64) for i, U in enumerate(factors) if i != k]
    return reduce(np.kron, others)


def tucker_reconstruct(F: TuckerFactors) -> np.ndarray:
    return multi_mode_product(F.core, F.factors)


def _leading_left_singular(M: np.ndarray, r: int) -> np.ndarray:
    # Gram eigendecomposition is much cheaper than an SVD for wide unfoldings.
    if M.shape[1] > 4 * M.shape[0]:
        w, V = np.linalg.eigh(M @ M.T)
        return V[:, ::-1][:, :r].copy()
    U, _, _ = np.linalg.svd(M, full_matrices=False)
    if U.shape[1] < r:
        # only happens when d_k > d_k^-; complete with an orthonormal basis
        Q, _ = np.linalg.qr(np.hstack([U, np.eye(M.shape[0])]))
        U = Q
    return U[:, :r].copy()


def hosvd(T: np.ndarray, ranks: Sequence[int]) -> TuckerFactors:
    """Truncated higher-order SVD of ``T`` with multilinear ranks ``ranks``."""
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != T.ndim:
        raise ShapeError(f"{len(ranks)} ranks given for an order-{T.ndim} tensor")
    for k, (d, r) in enumerate(zip(T.shape, ranks)):
        if not 1 <= r <= d:
            raise ShapeError(f"rank {r} invalid for mode {k} of size {d}")
    factors = tuple(_leading_left_singular(matricize(T, k), r) for k, r in enumerate(ranks))
    core = multi_mode_product(T, [U.T for U in factors])
    return TuckerFactors(core, factors)


def l2inf(M: np.ndarray) -> float:
    """Largest row l2 norm of a matrix."""
    return float(np.sqrt(np.max(np.sum(np.asarray(M) ** 2, axis=1))))


def incoherence(F: TuckerFactors) -> float:
    return max(l2inf(U) ** 2 * U.shape[0] / U.shape[1] for U in F.factors)


def dof(dims: Sequence[int], ranks: Sequence[int]) -> int:
    """Degrees of freedom ``r_1...r_m + sum_j d_j r_j``."""
    if len(dims) != len(ranks):
        raise ShapeError("dims and ranks differ in length")
    return int(np.prod([int(r) for r in ranks])) + sum(int(d) * int(r) for d, r in zip(dims, ranks))


def norms(T: np.ndarray) -> dict[str, float]:
    a = np.abs(T)
    return {
        "fro": float(np.sqrt(np.sum(T * T))),
        "l1": float(np.sum(a)),
        "sup": float(np.max(a)) if a.size else 0.0,
    }


def slice_mask(T: np.ndarray, k: int, j: int) -> np.ndarray:
    """Copy of ``T`` with every entry whose mode-``k`` index differs from ``j`` zeroed."""
    _check_mode(T.ndim, k)
    if not 0 <= j < T.shape[k]:
        raise ShapeError(f"slice {j} out of range for mode {k} of size {T.shape[k]}")
    out = np.zeros_like(T)
    idx = [slice(None)] * T.ndim
    idx[k] = j
    out[tuple(idx)] = T[tuple(idx)]
    return out


def unfold_singular_values(T: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.svd(matricize(T, k), compute_uv=False)
