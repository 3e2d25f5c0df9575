"""Synthetic data: incoherent low-rank signals, heavy-tailed noise, sparse corruption.

Every generator takes an integer seed and draws from ``numpy.random.default_rng``
(PCG64), so outputs are pure functions of (parameters, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .solvers import ObservationSet, estimate_signal_diagnostics
from .tensor_core import TuckerFactors, multi_mode_product, tucker_reconstruct

NOISE_KINDS = ("none", "gaussian", "student_t", "pareto")


@dataclass(frozen=True)
class NoiseModel:
    """i.i.d. zero-symmetric entrywise noise.

    ``kind`` is one of ``none``, ``gaussian`` (``scale`` = sigma),
    ``student_t`` (``nu`` degrees of freedom, multiplied by ``scale``) and
    ``pareto`` (Pareto magnitude with tail index ``shape`` and minimum
    ``scale``, times a Rademacher sign).
    """

    kind: str = "none"
    scale: float = 1.0
    nu: float = 2.01
    shape: float = 3.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("noise scale must be positive")
        if self.kind == "student_t" and self.nu <= 1:
            raise ValueError("student_t needs nu > 1 for a finite mean absolute value")
        if self.kind == "pareto" and self.shape <= 1:
            raise ValueError("pareto needs shape > 1 for a finite mean absolute value")

    @classmethod
    def gaussian(cls, sigma: float = 1.0) -> "NoiseModel":
        return cls("gaussian", scale=sigma)

    @classmethod
    def student_t(cls, nu: float = 2.01, scale: float = 1.0) -> "NoiseModel":
        return cls("student_t", scale=scale, nu=nu)

    @classmethod
    def pareto(cls, shape: float = 3.0, scale: float = 1.0) -> "NoiseModel":
        return cls("pareto", scale=scale, shape=shape)

    def mean_abs(self) -> float:
        """Closed-form ``E|xi|``."""
        if self.kind == "none":
            return 0.0
        if self.kind == "gaussian":
            return self.scale * math.sqrt(2.0 / math.pi)
        if self.kind == "student_t":
            nu = self.nu
            logc = gammaln((nu + 1) / 2) - gammaln(nu / 2)
            return self.scale * 2.0 * math.sqrt(nu) * math.exp(logc) / (math.sqrt(math.pi) * (nu - 1))
        return self.scale * self.shape / (self.shape - 1)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(size)
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal(size)
        if self.kind == "student_t":
            return self.scale * rng.standard_t(self.nu, size)
        mag = self.scale * (1.0 + rng.pareto(self.shape, size))
        return mag * rng.choice([-1.0, 1.0], size=size)


@dataclass(frozen=True)
class CorruptionModel:
    """Sparse corruptions with at most ``ceil(alpha * d_k^-)`` nonzeros per mode-k slice.

    Nonzero values are ``magnitude * ref_sup`` with a positive or random sign.
    """

    alpha: float = 0.0
    magnitude: float = 100.0
    sign: str = "positive"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.magnitude <= 0:
            raise ValueError("magnitude must be positive")
        if self.sign not in ("positive", "random"):
            raise ValueError("sign must be 'positive' or 'random'")


def random_orthonormal(d: int, r: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, r)))
    return Q * np.sign(np.diag(R))


def gen_lowrank(
    dims: Sequence[int],
    ranks: Sequence[int],
    seed: int,
    snr: float | None = None,
    noise: NoiseModel | None = None,
    fro: float | None = None,
) -> tuple[TuckerFactors, dict]:
    """Random Tucker signal with Gaussian core and orthonormalized Gaussian factors.

    With ``snr`` and a noise model the core is rescaled so that
    ``||T*||_F / E|xi| == snr``; ``fro`` sets the Frobenius norm directly.
    """
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(dims) != len(ranks) or any(not 1 <= r <= d for d, r in zip(dims, ranks)):
        raise ValueError(f"invalid dims/ranks {dims}/{ranks}")
    rng = np.random.default_rng(seed)
    factors = tuple(random_orthonormal(d, r, rng) for d, r in zip(dims, ranks))
    core = rng.standard_normal(ranks)
    if snr is not None:
        if noise is None or noise.mean_abs() == 0:
            raise ValueError("an SNR target needs a noise model with nonzero E|xi|")
        fro = snr * noise.mean_abs()
    if fro is not None:
        core *= fro / np.linalg.norm(core.ravel())
    F = TuckerFactors(core, factors)
    diag = estimate_signal_diagnostics(F)
    diag["fro"] = float(np.linalg.norm(core.ravel()))
    return F, diag


def gen_noise(dims: Sequence[int], model: NoiseModel, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return model.sample(tuple(int(d) for d in dims), rng)


def gen_corruption(dims: Sequence[int], model: CorruptionModel, ref_sup: float) -> np.ndarray:
    """Sparse corruption tensor obeying the per-slice cap in every mode.

    Candidate entries are visited in uniformly random order and accepted while
    every slice through them is below its cap, until ``round(alpha * d*)``
    entries are placed (fewer if the caps run out first).
    """
    dims = tuple(int(d) for d in dims)
    dstar = int(np.prod(dims))
    S = np.zeros(dstar)
    target = int(round(model.alpha * dstar))
    if target == 0:
        return S.reshape(dims)
    rng = np.random.default_rng(model.seed)
    caps = [math.ceil(round(model.alpha * (dstar // d), 9)) for d in dims]
    counts = [np.zeros(d, dtype=np.int64) for d in dims]
    order = rng.permutation(dstar)
    coords = np.unravel_index(order, dims)
    coords = [c.tolist() for c in coords]
    chosen = []
    for pos in range(dstar):
        ok = True
        for k in range(len(dims)):
            if counts[k][coords[k][pos]] >= caps[k]:
                ok = False
                break
        if not ok:
            continue
        for k in range(len(dims)):
            counts[k][coords[k][pos]] += 1
        chosen.append(order[pos])
        if len(chosen) == target:
            break
    chosen = np.asarray(chosen, dtype=np.int64)
    value = model.magnitude * ref_sup
    if model.sign == "positive":
        S[chosen] = value
    else:
        S[chosen] = value * rng.choice([-1.0, 1.0], size=len(chosen))
    return S.reshape(dims)


def gen_observations(
    F: TuckerFactors,
    noise: NoiseModel,
    corruption_alpha: float,
    n_per_fold: int,
    folds: int,
    seed: int,
    magnitude: float = 100.0,
    sign: str = "positive",
) -> ObservationSet:
    """Uniform sampling with replacement: ``y_i = [T*]_{w_i} + xi_i + s_i``.

    ``s_i`` is nonzero with probability ``corruption_alpha`` and then equals
    ``magnitude * ||T*||_inf`` (random sign when ``sign == 'random'``).
    """
    if not 0 <= corruption_alpha < 1:
        raise ValueError("corruption_alpha must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    dims = F.dims
    N = n_per_fold * folds
    T = tucker_reconstruct(F)
    flat = rng.integers(0, T.size, size=N)
    values = T.ravel()[flat] + noise.sample(N, rng)
    if corruption_alpha > 0:
        hit = rng.random(N) < corruption_alpha
        s = magnitude * float(np.max(np.abs(T)))
        signs = np.ones(N) if sign == "positive" else rng.choice([-1.0, 1.0], size=N)
        values = values + hit * s * signs
    idx = np.stack(np.unravel_index(flat, dims), axis=1)
    return ObservationSet(idx, values, dims, n_per_fold, folds)


def perturb_factors(F: TuckerFactors, rho: float, seed: int) -> TuckerFactors:
    """Start point near ``F``: each factor gets Gaussian noise of relative size ``rho``.

    The perturbed factors are re-orthonormalized and the core is recomputed by
    projecting ``full(F)``, so the result is the best fit of ``F`` within the
    perturbed subspaces. Used to watch convergence from a controlled distance.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    rng = np.random.default_rng(seed)
    Us = []
    for U in F.factors:
        d, r = U.shape
        Q, R = np.linalg.qr(U + rho * rng.standard_normal((d, r)) / math.sqrt(d))
        Us.append(Q * np.sign(np.diag(R)))
    core = multi_mode_product(tucker_reconstruct(F), [U.T for U in Us])
    return TuckerFactors(core, tuple(Us))
