"""Riemannian (sub-)gradient solvers for robust Tucker decomposition."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .losses import LossKind, LossSpec, drho, loss_value, rho, vanilla_gradient
from .riemannian import (
    StepSchedule,
    step_at,
    tangent_norm,
    tangent_project,
    retract_efficient,
)
from .tensor_core import (
    ShapeError,
    TuckerFactors,
    hosvd,
    incoherence,
    matricize,
    tucker_reconstruct,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The loss became non-finite or blew up; ``trace`` holds the records so far."""

    def __init__(self, message: str, trace: "IterateTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    Step scales left as ``None`` in ``schedule`` are resolved from the data:
    ``eta0 = eta0_scale * med|T_0 - Y|`` and
    ``eta_const = eta_scale * med|T_{l1} - Y|`` at the phase switch. For the
    square loss both default to 0.5, which makes a phase-two step the exact
    minimiser along the projected gradient.

    The default phase switch (``schedule.switch_at is None``) fires when the
    median projected-gradient norm over the last ``schedule.window``
    iterations drops below ``shrink`` times its value over the first window,
    or when the loss stalls (relative decrease below ``schedule.stall_tol``
    over a window while the gradient is also shrinking).
    """

    loss: LossSpec
    ranks: tuple[int, ...]
    schedule: StepSchedule = field(default_factory=StepSchedule)
    max_iters: int = 300
    tol: float = 1e-10
    tau1: float | None = None
    tau2: float | None = None
    enable_trim: bool = False
    seed: int = 0
    eta0_scale: float = 5.0
    eta_scale: float = 0.5
    shrink: float = 0.5
    divergence_factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        for name in ("tau1", "tau2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class IterRecord:
    iter: int
    phase: int
    eta: float
    loss: float
    pgrad_fro: float
    err_fro: float | None = None
    err_sup: float | None = None
    mu: float | None = None


@dataclass
class IterateTrace:
    records: list[IterRecord] = field(default_factory=list)
    switch_iter: int | None = None
    tau1: float | None = None
    tau2: float | None = None
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def has_truth(self) -> bool:
        return bool(self.records) and self.records[0].err_fro is not None

    def to_csv(self, path=None) -> str:
        cols = ["iter", "phase", "eta", "loss", "pgrad_fro"]
        if self.has_truth:
            cols += ["err_fro", "err_sup", "mu"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if v is None:
        return ""
    return repr(float(v))


def trun(T: np.ndarray, B: np.ndarray, tau1: float) -> np.ndarray:
    """Clip every entry of ``T`` to within ``tau1`` of the matching entry of ``B``."""
    if T.shape != B.shape:
        raise ShapeError(f"dimension mismatch: {T.shape} vs {B.shape}")
    if tau1 < 0:
        raise ValueError("tau1 must be >= 0")
    return np.minimum(np.maximum(T, B - tau1), B + tau1)


def trim(T: np.ndarray, tau2: float) -> np.ndarray:
    """Clip entry magnitudes at ``sqrt(tau2 / d*) * ||T||_F``."""
    if tau2 < 0:
        raise ValueError("tau2 must be >= 0")
    level = math.sqrt(tau2 / T.size) * float(np.linalg.norm(T.ravel()))
    return np.minimum(np.maximum(T, -level), level)


def estimate_signal_diagnostics(X, ranks: Sequence[int] | None = None) -> dict[str, float]:
    """Signal strength, largest singular value, condition number and incoherence.

    ``X`` is either :class:`TuckerFactors` or a dense tensor; for a dense tensor
    ``ranks`` selects which singular value counts as the signal strength
    (all of them when omitted).
    """
    if isinstance(X, TuckerFactors):
        ranks = X.ranks
        svals = [np.linalg.svd(matricize(X.core, k), compute_uv=False) for k in range(X.order)]
        mu = incoherence(X)
    else:
        X = np.asarray(X, dtype=np.float64)
        svals = [np.linalg.svd(matricize(X, k), compute_uv=False) for k in range(X.ndim)]
        if ranks is None:
            ranks = tuple(len(s) for s in svals)
        mu = incoherence(hosvd(X, ranks)) if np.any(X) else float("nan")
    lam_min = min(float(s[r - 1]) for s, r in zip(svals, ranks))
    lam_max = max(float(s[0]) for s in svals)
    if lam_max == 0.0 or lam_min == 0.0:
        raise ZeroDivisionError("condition number undefined for a rank-deficient or zero tensor")
    return {"lambda_min": lam_min, "lambda_max": lam_max, "kappa": lam_max / lam_min, "mu": mu}


def _median_abs(x: np.ndarray) -> float:
    return float(np.median(np.abs(x)))


def _resolve_eta0(cfg: SolverConfig, residual: np.ndarray, data: np.ndarray) -> float:
    if cfg.schedule.eta0 is not None:
        return cfg.schedule.eta0
    if cfg.loss.kind is LossKind.SQUARE:
        return 0.5
    med = _median_abs(residual)
    if med == 0.0:
        med = float(np.sqrt(np.mean(residual**2)))
    if med == 0.0:
        # exact start: keep steps at round-off size rather than kicking it away
        med = np.finfo(float).eps * float(np.max(np.abs(data), initial=0.0))
    return cfg.eta0_scale * med if med > 0 else 1.0


def _resolve_eta_const(cfg: SolverConfig, residual: np.ndarray, fallback: float) -> float:
    if cfg.schedule.eta_const is not None:
        return cfg.schedule.eta_const
    if cfg.loss.kind is LossKind.SQUARE:
        return 0.5
    med = _median_abs(residual)
    return cfg.eta_scale * med if med > 0 else fallback


class _PhaseSwitch:
    """Decides when the decaying phase-one schedule hands over to the constant step."""

    def __init__(self, sched: StepSchedule, shrink: float):
        self.sched = sched
        self.shrink = shrink
        self.gnorms: list[float] = []
        self.losses: list[float] = []

    def update(self, l: int, loss: float, gnorm: float) -> bool:
        self.gnorms.append(gnorm)
        self.losses.append(loss)
        if self.sched.switch_at is not None:
            return l >= self.sched.switch_at
        w = self.sched.window
        if len(self.gnorms) < 2 * w:
            return False
        first = float(np.median(self.gnorms[:w]))
        recent = float(np.median(self.gnorms[-w:]))
        if first <= 0:
            return False
        if recent < self.shrink * first:
            return True
        old = self.losses[-w - 1]
        stalled = old > 0 and (old - loss) / old < self.sched.stall_tol
        return stalled and recent < first * (1 - 0.5 * (1 - self.shrink))


def _auto_thresholds(cfg: SolverConfig, F: TuckerFactors, T_full: np.ndarray, Y: np.ndarray):
    mu_hat = incoherence(F)
    m = F.order
    rstar = int(np.prod(F.ranks))
    tau1 = cfg.tau1 if cfg.tau1 is not None else 12.0 * _median_abs(T_full - Y) * mu_hat**m * rstar
    tau2 = cfg.tau2 if cfg.tau2 is not None else 1.5 * mu_hat**m * rstar
    return tau1, tau2


def _record(l, phase, eta, loss, gnorm, T_full, truth, F) -> IterRecord:
    rec = IterRecord(l, phase, eta, loss, gnorm)
    if truth is not None:
        E = T_full - truth
        rec.err_fro = float(np.linalg.norm(E.ravel()))
        rec.err_sup = float(np.max(np.abs(E)))
        rec.mu = incoherence(F)
    return rec


def _divergence_floor(spec: LossSpec, values: np.ndarray) -> float:
    # round-off around an exact fit must not count as growth
    return max(1e-8 * float(np.sum(rho(spec, np.asarray(values)))), np.finfo(float).tiny)


def _check_start(Y: np.ndarray, cfg: SolverConfig, T0: TuckerFactors) -> None:
    if T0.ranks != cfg.ranks:
        raise ShapeError(f"initial ranks {T0.ranks} differ from configured ranks {cfg.ranks}")
    if T0.dims != Y.shape:
        raise ShapeError(f"initial dims {T0.dims} differ from data dims {Y.shape}")


def _stalled(prev: float, loss: float, tol: float) -> bool:
    return abs(prev - loss) / max(abs(prev), np.finfo(float).tiny) < tol


def _descend(
    Y: np.ndarray,
    cfg: SolverConfig,
    T0: TuckerFactors,
    truth: np.ndarray | None,
    use_trim: bool,
) -> tuple[TuckerFactors, IterateTrace]:
    _check_start(Y, cfg, T0)
    sched = cfg.schedule
    trace = IterateTrace()
    switch = _PhaseSwitch(sched, cfg.shrink)
    F = T0
    T_full = tucker_reconstruct(F)
    eta0 = _resolve_eta0(cfg, T_full - Y, Y)
    sched = replace(sched, eta0=eta0)
    if cfg.loss.kind is LossKind.SQUARE and cfg.schedule.switch_at is None:
        sched = replace(sched, switch_at=0)
        switch.sched = sched
    phase = 1
    anchor = None
    loss0 = None
    prev_loss = None
    floor = _divergence_floor(cfg.loss, Y)
    for l in range(cfg.max_iters + 1):
        loss = loss_value(T_full, Y, cfg.loss)
        if not math.isfinite(loss):
            trace.stop_reason = "non-finite loss"
            raise DivergenceError(f"non-finite loss at iteration {l}", trace)
        if loss0 is None:
            loss0 = loss
        elif loss > cfg.divergence_factor * max(loss0, floor):
            trace.stop_reason = "diverged"
            raise DivergenceError(f"loss grew from {loss0:.6g} to {loss:.6g} at iteration {l}", trace)

        G = vanilla_gradient(T_full, Y, cfg.loss)
        tv = tangent_project(F, G)
        gnorm = tangent_norm(tv)

        if phase == 1 and switch.update(l, loss, gnorm):
            phase = 2
            trace.switch_iter = l
            anchor = T_full
            sched = replace(sched, eta_const=_resolve_eta_const(cfg, T_full - Y, step_at(sched, l, 1)))
            if use_trim:
                trace.tau1, trace.tau2 = _auto_thresholds(cfg, F, T_full, Y)
            log.debug("phase switch at %d, eta=%g", l, sched.eta_const)

        done = l == cfg.max_iters
        if not done and (loss == 0.0 or prev_loss is not None and _stalled(prev_loss, loss, cfg.tol)):
            done = True
            trace.stop_reason = "tolerance"
        eta = step_at(sched, l, phase)
        trace.records.append(_record(l, phase, float("nan") if done else eta, loss, gnorm, T_full, truth, F))
        if done:
            trace.stop_reason = trace.stop_reason or "max_iters"
            break
        prev_loss = loss

        if use_trim and phase == 2:
            X = T_full - eta * tv.dense()
            X = trim(trun(X, anchor, trace.tau1), trace.tau2)
            F = hosvd(X, cfg.ranks)
        else:
            F = retract_efficient(F, tv, eta)
        T_full = tucker_reconstruct(F)
    return F, trace


def rsgrad(
    Y: np.ndarray,
    cfg: SolverConfig,
    T0: TuckerFactors,
    truth: np.ndarray | None = None,
) -> tuple[TuckerFactors, IterateTrace]:
    """Riemannian (sub-)gradient descent with a two-phase step schedule.

    Each iteration takes the vanilla (sub-)gradient of the entrywise loss,
    projects it onto the tangent space at the current iterate, steps, and
    retracts with a rank-``r`` HOSVD. With the square loss this is the plain
    Riemannian gradient baseline. ``truth`` only adds error columns to the trace.
    """
    return _descend(Y, cfg, T0, truth, use_trim=False)


def rsgrad_quantile_trim(
    Y: np.ndarray,
    cfg: SolverConfig,
    T0: TuckerFactors,
    truth: np.ndarray | None = None,
) -> tuple[TuckerFactors, IterateTrace]:
    """Quantile-loss sub-gradient descent with phase-two truncation and trimming.

    When ``cfg.enable_trim`` is set, every phase-two update is clipped to within
    ``tau1`` of the phase-one output, then trimmed entrywise at
    ``sqrt(tau2/d*) ||.||_F``, before the HOSVD retraction. Unset thresholds
    are estimated at the switch from the median residual and the incoherence
    of the phase-one output.
    """
    if cfg.loss.kind is not LossKind.QUANTILE:
        raise ValueError(f"quantile solver called with {cfg.loss}")
    alpha_bound = 1.0 / (12 * (5 * Y.ndim + 1) ** 2 * 3**Y.ndim * int(np.prod(cfg.ranks)))
    log.debug("corruption-rate bound from theory (not enforced): %.3g", alpha_bound)
    return _descend(Y, cfg, T0, truth, use_trim=cfg.enable_trim)


# --- completion -------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSet:
    """Sampled entries ``values[i] = [T]_{indices[i]} + noise`` split into folds.

    Fold ``f`` holds rows ``f * fold_size : (f + 1) * fold_size``; fold 0 is
    reserved for initialization.
    """

    indices: np.ndarray
    values: np.ndarray
    dims: tuple[int, ...]
    fold_size: int
    n_folds: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dims", dims)
        if self.fold_size < 1 or self.n_folds < 1:
            raise ValueError("fold size and fold count must be positive")
        if idx.ndim != 2 or idx.shape[1] != len(dims):
            raise ShapeError(f"indices of shape {idx.shape} for dims {dims}")
        if len(vals) != len(idx):
            raise ShapeError("indices and values differ in length")
        if len(idx) != self.fold_size * self.n_folds:
            raise ValueError(
                f"{len(idx)} observations cannot form {self.n_folds} folds of {self.fold_size}"
            )
        if np.any(idx < 0) or np.any(idx >= np.array(dims)):
            raise ShapeError("observation index outside dims")

    @classmethod
    def from_arrays(cls, indices, values, dims, n_folds: int) -> tuple["ObservationSet", int]:
        """Split into ``n_folds`` equal folds, dropping the trailing remainder.

        Returns the set and the number of dropped observations.
        """
        if n_folds < 1:
            raise ValueError("need at least one fold")
        indices = np.asarray(indices, dtype=np.int64)
        n = len(indices) // n_folds
        if n < 1:
            raise ValueError(f"{len(indices)} observations are too few for {n_folds} folds")
        keep = n * n_folds
        return cls(indices[:keep], np.asarray(values)[:keep], dims, n, n_folds), len(indices) - keep

    def fold(self, f: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= f < self.n_folds:
            raise IndexError(f"fold {f} out of range")
        s = slice(f * self.fold_size, (f + 1) * self.fold_size)
        return self.indices[s], self.values[s]

    def flat(self, idx: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(idx.T), self.dims)


def sparse_subgradient(
    T_full: np.ndarray, flat_idx: np.ndarray, values: np.ndarray, spec: LossSpec, scale: float = 1.0
) -> np.ndarray:
    """Dense tensor holding ``scale * drho`` summed over (possibly repeated) sampled entries."""
    res = T_full.ravel()[flat_idx] - values
    G = np.zeros(T_full.size)
    np.add.at(G, flat_idx, scale * np.asarray(drho(spec, res)))
    return G.reshape(T_full.shape)


def sample_loss(T_full: np.ndarray, flat_idx: np.ndarray, values: np.ndarray, spec: LossSpec) -> float:
    return float(np.sum(rho(spec, T_full.ravel()[flat_idx] - values)))


def complete_sample_split(
    obs: ObservationSet,
    dims: Sequence[int],
    cfg: SolverConfig,
    T0: TuckerFactors,
    truth: np.ndarray | None = None,
) -> tuple[TuckerFactors, IterateTrace]:
    """Sub-gradient descent with sample splitting: iteration ``l`` only sees fold ``l + 1``.

    The sub-gradient is rescaled by ``d*/n`` so that it is an unbiased estimate
    of the full-tensor sub-gradient and the step rules of :func:`rsgrad` carry
    over unchanged. Runs exactly ``n_folds - 1`` iterations.
    """
    dims = tuple(int(d) for d in dims)
    if dims != obs.dims:
        raise ShapeError(f"dims {dims} differ from observation dims {obs.dims}")
    if obs.n_folds < 2:
        raise ValueError("sample splitting needs at least two folds")
    if T0.ranks != cfg.ranks or T0.dims != dims:
        raise ShapeError("initial point does not match dims/ranks")
    M = obs.n_folds - 1
    dstar = int(np.prod(dims))
    scale = dstar / obs.fold_size
    sched = cfg.schedule
    switch = _PhaseSwitch(sched, cfg.shrink)
    trace = IterateTrace()
    F = T0
    T_full = tucker_reconstruct(F)

    flat0, vals0 = obs.flat(obs.fold(1)[0]), obs.fold(1)[1]
    sched = replace(sched, eta0=_resolve_eta0(cfg, T_full.ravel()[flat0] - vals0, vals0))
    phase = 1
    loss0 = None
    floor = _divergence_floor(cfg.loss, obs.values[: obs.fold_size])
    for l in range(M + 1):
        if l < M:
            idx, vals = obs.fold(l + 1)
        else:
            idx, vals = obs.fold(M)
        flat = obs.flat(idx)
        loss = sample_loss(T_full, flat, vals, cfg.loss)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {l}", trace)
        loss0 = loss if loss0 is None else loss0
        if loss > cfg.divergence_factor * max(loss0, floor):
            raise DivergenceError(f"fold loss grew from {loss0:.6g} to {loss:.6g}", trace)
        if l == M:
            trace.records.append(_record(l, phase, float("nan"), loss, float("nan"), T_full, truth, F))
            break
        G = sparse_subgradient(T_full, flat, vals, cfg.loss, scale)
        tv = tangent_project(F, G)
        gnorm = tangent_norm(tv)
        if phase == 1 and switch.update(l, loss, gnorm):
            phase = 2
            trace.switch_iter = l
            res = T_full.ravel()[flat] - vals
            sched = replace(sched, eta_const=_resolve_eta_const(cfg, res, step_at(sched, l, 1)))
        eta = step_at(sched, l, phase)
        trace.records.append(_record(l, phase, eta, loss, gnorm, T_full, truth, F))
        F = retract_efficient(F, tv, eta)
        T_full = tucker_reconstruct(F)
    trace.stop_reason = "folds exhausted"
    return F, trace


def completion_config(
    ranks: Sequence[int],
    loss: LossSpec | None = None,
    q: float = 0.85,
    eta0_scale: float = 4.0,
    **kwargs,
) -> SolverConfig:
    """Settings for :func:`complete_sample_split`.

    Only one fold is seen per iteration, so the run is short and the step has
    to decay faster than in the fully observed case.
    """
    loss = loss if loss is not None else LossSpec.absolute()
    sched = kwargs.pop("schedule", StepSchedule(q=q))
    return SolverConfig(loss, tuple(ranks), sched, eta0_scale=eta0_scale, **kwargs)
