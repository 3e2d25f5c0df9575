"""Truncated spectral initialization and data-driven scale estimates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_core import TuckerFactors, hosvd, matricize, multi_mode_product

AUTO_TAU_QUANTILE = 0.999


TAU_RULES = ("robust", "quantile")


@dataclass(frozen=True)
class InitConfig:
    """Truncation level ``tau``, or the rule that picks it when ``tau`` is None.

    ``robust`` uses :func:`estimate_tau_robust`; ``quantile`` uses
    :func:`estimate_tau_auto`, which is only safe when fewer than 0.1% of the
    entries are corrupted.
    """

    ranks: tuple[int, ...]
    tau: float | None = None
    tau_rule: str = "robust"

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"truncation level must be positive, got {self.tau}")
        if self.tau_rule not in TAU_RULES:
            raise ValueError(f"tau_rule must be one of {TAU_RULES}")

    def resolve_tau(self, Y: np.ndarray) -> float:
        if self.tau is not None:
            return self.tau
        if self.tau_rule == "robust":
            return estimate_tau_robust(Y)
        return estimate_tau_auto(Y)


def truncate_entries(Y: np.ndarray, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return np.clip(Y, -tau, tau)


def estimate_tau_auto(Y: np.ndarray) -> float:
    """99.9th percentile of ``|Y|`` (linear interpolation between order statistics)."""
    a = np.abs(np.asarray(Y, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("empty tensor")
    tau = float(np.quantile(a, AUTO_TAU_QUANTILE))
    if tau > 0:
        return tau
    # more than 99.9% zeros: fall back to the largest magnitude, or 1 for the zero tensor
    top = float(a.max())
    return top if top > 0 else 1.0


def estimate_tau_robust(values, factor: float = 6.0) -> float:
    """Median-based truncation level ``factor * med|y|``, capped by the 99.9% quantile.

    Unlike the plain quantile it is unaffected by a contaminated fraction of up
    to one half, which matters when the fraction of outliers exceeds 0.1%.
    """
    a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    med = float(np.median(a))
    tau = min(factor * med, estimate_tau_auto(a.reshape(1, -1)))
    return tau if tau > 0 else estimate_tau_auto(a.reshape(1, -1))


def estimate_noise_scale(T: np.ndarray, Y: np.ndarray) -> float:
    """Median absolute residual, a rough noise scale that ignores sparse outliers."""
    if T.shape != Y.shape:
        raise ValueError(f"dimension mismatch: {T.shape} vs {Y.shape}")
    return float(np.median(np.abs(T - Y)))


def auto_delta(T: np.ndarray, Y: np.ndarray, factor: float = 0.3) -> float:
    """Pseudo-Huber smoothing level tied to the residual scale of a starting point."""
    scale = estimate_noise_scale(T, Y)
    return factor * scale if scale > 0 else 1.0


def spectral_init(Y: np.ndarray, cfg: InitConfig) -> TuckerFactors:
    return hosvd(truncate_entries(Y, cfg.resolve_tau(Y)), cfg.ranks)


def sparse_fill(indices: np.ndarray, values: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Inverse-propensity estimate ``(d*/n) sum_i y_i e_{w_i}`` from ``n`` samples."""
    dims = tuple(int(d) for d in dims)
    flat = np.ravel_multi_index(tuple(np.asarray(indices).T), dims)
    out = np.zeros(int(np.prod(dims)))
    np.add.at(out, flat, np.asarray(values, dtype=np.float64))
    out *= out.size / len(values)
    return out.reshape(dims)


def _offdiag_leading(M: np.ndarray, r: int) -> np.ndarray:
    """Leading ``r`` eigenvectors of ``M M^T`` with its diagonal removed."""
    G = M @ M.T
    np.fill_diagonal(G, 0.0)
    w, V = np.linalg.eigh(G)
    return V[:, np.argsort(w)[::-1][:r]]


def completion_init(indices: np.ndarray, values: np.ndarray, dims: Sequence[int], ranks: Sequence[int]) -> TuckerFactors:
    """Spectral initialization from one fold of sampled entries.

    Observed values are clipped at :func:`estimate_tau_robust` and spread into
    the inverse-propensity fill. Each factor is read off the Gram matrix of the
    fill's unfolding with the diagonal removed: at low sampling rates the
    diagonal is dominated by squared sampling noise, which otherwise drowns
    the signal directions. The core is the fill projected onto the factors.
    """
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(dims) != len(ranks) or any(not 1 <= r <= d for d, r in zip(dims, ranks)):
        raise ValueError(f"invalid dims/ranks {dims}/{ranks}")
    values = np.asarray(values, dtype=np.float64)
    clipped = truncate_entries(values, estimate_tau_robust(values))
    X = sparse_fill(indices, clipped, dims)
    Us = tuple(_offdiag_leading(matricize(X, k), r) for k, r in enumerate(ranks))
    return TuckerFactors(multi_mode_product(X, [U.T for U in Us]), Us)
