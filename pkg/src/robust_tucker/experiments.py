"""Replicated synthetic experiments driven by a JSON spec.

A spec names a signal shape, a noise model, a corruption rate (or a grid of
rates), a list of losses and a number of replications. Every combination runs
the solver from the same starting point for a given (seed, alpha) and yields
one result row. Rows are kept sorted by key, so a results file is identical
across reruns no matter how many worker threads were used.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from .initialization import InitConfig, auto_delta, spectral_init
from .losses import LossKind, LossSpec
from .riemannian import StepSchedule
from .solvers import DivergenceError, IterateTrace, SolverConfig, rsgrad
from .synth import CorruptionModel, NoiseModel, gen_corruption, gen_lowrank, gen_noise, perturb_factors

log = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "experiment",
    "seed",
    "loss",
    "alpha",
    "snr",
    "final_err_fro",
    "final_err_sup",
    "iters",
]
TIMING_COLUMNS = ["experiment", "seed", "loss", "alpha", "wall_time"]
THREADS_ENV = "ROBUST_TUCKER_THREADS"

_SCHEDULE_KEYS = {f.name for f in fields(StepSchedule)}
_SOLVER_KEYS = {f.name for f in fields(SolverConfig)} - {"loss", "ranks", "schedule"}


@dataclass(frozen=True)
class LossChoice:
    """A loss as named in a spec; ``delta == "auto"`` is resolved per run."""

    kind: str
    delta: float | str | None = None

    @property
    def label(self) -> str:
        if self.kind == "square":
            return "square"
        d = self.delta if self.delta is not None else ("auto" if self.kind == "pseudohuber" else 0.5)
        return f"{self.kind}({d if isinstance(d, str) else format(float(d), 'g')})"

    def resolve(self, T0_full: np.ndarray, Y: np.ndarray) -> LossSpec:
        kind = LossKind(self.kind)
        if kind is LossKind.SQUARE:
            return LossSpec.square()
        if kind is LossKind.QUANTILE:
            return LossSpec(kind, 0.5 if self.delta is None else float(self.delta))
        if self.delta is None or self.delta == "auto":
            return LossSpec.pseudo_huber(auto_delta(T0_full, Y))
        return LossSpec.pseudo_huber(float(self.delta))


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dims: tuple[int, ...]
    ranks: tuple[int, ...]
    noise: NoiseModel = field(default_factory=NoiseModel)
    alphas: tuple[float, ...] = (0.0,)
    corruption_magnitude: float = 100.0
    corruption_sign: str = "positive"
    snr: float | None = None
    fro: float | None = None
    losses: tuple[LossChoice, ...] = (LossChoice("quantile"),)
    replications: int = 1
    base_seed: int = 0
    seeds: tuple[int, ...] | None = None
    solver: dict = field(default_factory=dict)
    init: dict = field(default_factory=lambda: {"kind": "spectral"})
    out: str | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.replications:
            raise ValueError("seeds must have one entry per replication")
        if len(self.dims) != len(self.ranks):
            raise ValueError("dims and ranks differ in length")
        if not self.losses:
            raise ValueError("at least one loss is required")
        if self.snr is not None and self.noise.kind == "none":
            raise ValueError("an SNR target needs a noise model")
        unknown = set(self.solver) - _SCHEDULE_KEYS - _SOLVER_KEYS
        if unknown:
            raise ValueError(f"unknown solver settings {sorted(unknown)}")
        kind = self.init.get("kind", "spectral")
        if kind not in ("spectral", "perturb"):
            raise ValueError(f"unknown init kind {kind!r}")
        for a in self.alphas:
            CorruptionModel(a, self.corruption_magnitude, self.corruption_sign)

    @property
    def seed_list(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return tuple(self.seeds)
        return tuple(self.base_seed + i for i in range(self.replications))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentSpec":
        d = dict(d)
        noise = d.pop("noise", None) or {"kind": "none"}
        corr = d.pop("corruption", None) or {}
        alphas = corr.get("alpha", 0.0)
        alphas = tuple(float(a) for a in (alphas if isinstance(alphas, (list, tuple)) else [alphas]))
        losses = tuple(
            LossChoice(x) if isinstance(x, str) else LossChoice(x["kind"], x.get("delta"))
            for x in d.pop("losses", ["quantile"])
        )
        for x in losses:
            LossKind(x.kind)
        seeds = d.pop("seeds", None)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown spec fields {sorted(extra)}")
        return cls(
            name=str(d.pop("name")),
            dims=tuple(int(x) for x in d.pop("dims")),
            ranks=tuple(int(x) for x in d.pop("ranks")),
            noise=NoiseModel(**noise),
            alphas=alphas,
            corruption_magnitude=float(corr.get("magnitude", 100.0)),
            corruption_sign=corr.get("sign", "positive"),
            losses=losses,
            seeds=tuple(int(s) for s in seeds) if seeds is not None else None,
            **d,
        )

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunResult:
    key: tuple
    row: dict
    wall_time: float
    trace: IterateTrace


def solver_config(spec: ExperimentSpec, loss: LossSpec) -> SolverConfig:
    sched = StepSchedule(**{k: v for k, v in spec.solver.items() if k in _SCHEDULE_KEYS})
    extra = {k: v for k, v in spec.solver.items() if k in _SOLVER_KEYS}
    return SolverConfig(loss, spec.ranks, sched, **extra)


def make_problem(spec: ExperimentSpec, seed: int, alpha: float):
    """Ground truth, observed tensor and starting point for one replication."""
    F, _ = gen_lowrank(spec.dims, spec.ranks, seed, snr=spec.snr, noise=spec.noise if spec.snr else None, fro=spec.fro)
    T = F.full()
    Y = T + gen_noise(spec.dims, spec.noise, seed + 7919)
    if alpha > 0:
        model = CorruptionModel(alpha, spec.corruption_magnitude, spec.corruption_sign, seed=seed + 104729)
        Y = Y + gen_corruption(spec.dims, model, float(np.max(np.abs(T))))
    init = spec.init
    if init.get("kind", "spectral") == "perturb":
        T0 = perturb_factors(F, float(init.get("rho", 0.5)), seed + 15485863)
    else:
        T0 = spectral_init(Y, InitConfig(spec.ranks, init.get("tau"), init.get("tau_rule", "robust")))
    return T, Y, T0


def run_one(spec: ExperimentSpec, seed: int, alpha: float, choice: LossChoice) -> RunResult:
    T, Y, T0 = make_problem(spec, seed, alpha)
    loss = choice.resolve(T0.full(), Y)
    t0 = time.perf_counter()
    _, trace = rsgrad(Y, solver_config(spec, loss), T0, truth=T)
    wall = time.perf_counter() - t0
    last = trace.records[-1]
    row = {
        "experiment": spec.name,
        "seed": seed,
        "loss": choice.label,
        "alpha": alpha,
        "snr": spec.snr if spec.snr is not None else "",
        "final_err_fro": last.err_fro / float(np.linalg.norm(T.ravel())),
        "final_err_sup": last.err_sup / float(np.max(np.abs(T))),
        "iters": len(trace) - 1,
    }
    return RunResult(row_key(row), row, wall, trace)


def row_key(row: dict) -> tuple:
    return (str(row["experiment"]), int(row["seed"]), str(row["loss"]), float(row["alpha"]))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path, columns, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in sorted(rows, key=row_key):
            w.writerow([_fmt(r[c]) for c in columns])
    os.replace(tmp, path)


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def thread_count(default: int | None = None) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    return default or 1


def trace_name(key: tuple) -> str:
    name, seed, loss, alpha = key
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in loss)
    return f"{name}_{safe}_a{alpha:g}_s{seed}.csv"


def run_experiment(spec: ExperimentSpec, out_dir=None, resume: bool = False, threads: int | None = None):
    """Run every (seed, alpha, loss) combination and write ``results.csv``.

    Returns ``(rows, failures)``. Traces go to ``traces/`` and wall-clock times
    to ``timings.csv``; the results file itself holds only deterministic
    columns. The results file is rewritten after each finished run, so a
    crash loses at most the runs in flight. With ``resume`` existing rows are
    kept and their keys skipped.
    """
    out_dir = out_dir or spec.out or "."
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    res_path = os.path.join(out_dir, "results.csv")
    time_path = os.path.join(out_dir, "timings.csv")
    rows: dict[tuple, dict] = {}
    times: dict[tuple, dict] = {}
    if resume and os.path.exists(res_path):
        for r in read_results(res_path):
            rows[row_key(r)] = r
        if os.path.exists(time_path):
            for r in read_results(time_path):
                times[row_key(r)] = r
    jobs = [
        (seed, alpha, choice)
        for seed in spec.seed_list
        for alpha in spec.alphas
        for choice in spec.losses
        if (spec.name, seed, choice.label, float(alpha)) not in rows
    ]
    failures: list[dict] = []
    lock = threading.Lock()

    def work(job):
        seed, alpha, choice = job
        try:
            res = run_one(spec, seed, alpha, choice)
        except (DivergenceError, ArithmeticError, ValueError) as exc:
            log.warning("run %s seed=%d alpha=%g failed: %s", choice.label, seed, alpha, exc)
            with lock:
                failures.append({"seed": seed, "alpha": alpha, "loss": choice.label, "error": str(exc)})
            return
        res.trace.to_csv(os.path.join(out_dir, "traces", trace_name(res.key)))
        with lock:
            rows[res.key] = res.row
            times[res.key] = {**{c: res.row[c] for c in TIMING_COLUMNS[:-1]}, "wall_time": res.wall_time}
            _write_rows(res_path, RESULT_COLUMNS, rows.values())
            _write_rows(time_path, TIMING_COLUMNS, times.values())

    n = min(threads or thread_count(), max(len(jobs), 1))
    if n == 1:
        for job in jobs:
            work(job)
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            list(pool.map(work, jobs))
    _write_rows(res_path, RESULT_COLUMNS, rows.values())
    _write_rows(time_path, TIMING_COLUMNS, times.values())
    if failures:
        with open(os.path.join(out_dir, "failures.json"), "w") as fh:
            json.dump(sorted(failures, key=lambda f: (f["seed"], f["alpha"], f["loss"])), fh, indent=2)
    return [rows[k] for k in sorted(rows)], failures


def override(spec: ExperimentSpec, **changes) -> ExperimentSpec:
    """Copy of ``spec`` with top-level fields or solver settings replaced."""
    solver = dict(spec.solver)
    top = {}
    for k, v in changes.items():
        if v is None:
            continue
        if k in _SCHEDULE_KEYS or k in _SOLVER_KEYS:
            solver[k] = v
        else:
            top[k] = v
    return replace(spec, solver=solver, **top)
