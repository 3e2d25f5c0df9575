"""Command line entry point: ``robust-tucker {decompose,synth,experiment,complete,info}``.

Exit codes: 0 success, 1 invalid flags or arguments, 2 unreadable or
malformed input file, 3 solver divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import io as tio
from .experiments import ExperimentSpec, override, run_experiment
from .initialization import InitConfig, auto_delta, completion_init, spectral_init
from .losses import LossKind, LossSpec
from .riemannian import DegeneratePointError, StepSchedule
from .solvers import (
    DivergenceError,
    ObservationSet,
    SolverConfig,
    complete_sample_split,
    completion_config,
    estimate_signal_diagnostics,
    rsgrad,
    rsgrad_quantile_trim,
)
from .synth import CorruptionModel, NoiseModel, gen_corruption, gen_lowrank, gen_noise, gen_observations
from .tensor_core import norms

log = logging.getLogger("robust_tucker")

EXIT_USAGE = 1
EXIT_FILE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _positive(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _solver_flags(p: argparse.ArgumentParser, loss_default: str = "quantile") -> None:
    p.add_argument("--ranks", type=_int_list, help="Tucker ranks r1,r2,...")
    p.add_argument("--loss", choices=[k.value for k in LossKind], default=loss_default)
    p.add_argument("--delta", type=_positive, help="pseudo-Huber smoothing or quantile level (default: auto / 0.5)")
    p.add_argument("--q", type=float, help="phase-one step decay factor in (0, 1)")
    p.add_argument("--eta0", type=_positive, help="initial step size")
    p.add_argument("--eta", type=_positive, help="phase-two constant step size")
    p.add_argument("--switch-at", type=int, help="force the phase switch at this iteration")
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--trim", action="store_true", help="truncate and trim phase-two iterates (quantile loss)")
    p.add_argument("--tau1", type=float, help="truncation radius (auto when omitted)")
    p.add_argument("--tau2", type=float, help="trimming level (auto when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-tucker", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("decompose", help="robust Tucker decomposition of a dense tensor file")
    p.add_argument("input", help="TNSR binary or triplet CSV")
    p.add_argument("--dims", type=_int_list, help="dims for a triplet file (default: inferred)")
    p.add_argument("--tau", type=_positive, help="initial truncation level")
    p.add_argument("--tau-rule", choices=["robust", "quantile"], default="robust")
    _solver_flags(p)

    p = sub.add_parser("complete", help="robust completion from sampled entries with sample splitting")
    p.add_argument("input", help="triplet CSV of observations")
    p.add_argument("--dims", type=_int_list, help="tensor dims (default: inferred)")
    p.add_argument("--folds", type=int, help="number of folds M+1 (fold 0 initializes)")
    p.add_argument("--iters", type=int, help="number of iterations M; alternative to --folds")
    _solver_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic low-rank tensor with noise and corruption")
    p.add_argument("--dims", type=_int_list, required=True)
    p.add_argument("--ranks", type=_int_list, required=True)
    p.add_argument("--noise", choices=["none", "gaussian", "student_t", "pareto"], default="none")
    p.add_argument("--noise-scale", type=_positive, default=1.0)
    p.add_argument("--nu", type=_positive, default=2.01)
    p.add_argument("--shape", type=_positive, default=3.0)
    p.add_argument("--snr", type=_positive)
    p.add_argument("--fro", type=_positive, help="Frobenius norm of the signal (when no SNR is given)")
    p.add_argument("--alpha", type=float, default=0.0, help="corruption fraction per slice")
    p.add_argument("--magnitude", type=_positive, default=100.0)
    p.add_argument("--sign", choices=["positive", "random"], default="positive")
    p.add_argument("--observations", type=int, help="write this many sampled entries as triplets instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")

    p = sub.add_parser("experiment", help="run a replicated experiment from a JSON spec")
    p.add_argument("spec", help="JSON experiment spec")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true", help="skip runs already in results.csv")
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--eta0", type=_positive)
    p.add_argument("--eta", type=_positive)

    p = sub.add_parser("info", help="shape, norms and spectral diagnostics of a tensor file")
    p.add_argument("input")
    p.add_argument("--dims", type=_int_list)
    p.add_argument("--ranks", type=_int_list)
    return parser


def _load(path, dims=None) -> np.ndarray:
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    try:
        return tio.load_tensor(path, dims)
    except tio.TensorFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise tio.TensorFormatError(path, str(exc)) from exc


def _loss_from_args(args, T0_full=None, Y=None) -> LossSpec:
    """Loss named by the flags; pseudo-Huber without ``--delta`` needs a start point."""
    kind = LossKind(args.loss)
    try:
        if kind is LossKind.SQUARE:
            return LossSpec.square()
        if kind is LossKind.QUANTILE:
            return LossSpec(kind, 0.5 if args.delta is None else args.delta)
        if args.delta is not None:
            return LossSpec.pseudo_huber(args.delta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return LossSpec.pseudo_huber(auto_delta(T0_full, Y))


def _schedule(args, base: StepSchedule | None = None) -> StepSchedule:
    base = base or StepSchedule()
    changes = {}
    if args.q is not None:
        changes["q"] = args.q
    if args.eta0 is not None:
        changes["eta0"] = args.eta0
    if args.eta is not None:
        changes["eta_const"] = args.eta
    if getattr(args, "switch_at", None) is not None:
        changes["switch_at"] = args.switch_at
    try:
        return StepSchedule(**{**base.__dict__, **changes})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_ranks(ranks, dims) -> None:
    if ranks is None:
        raise UsageError("--ranks is required")
    if len(ranks) != len(dims) or any(r > d for r, d in zip(ranks, dims)):
        raise UsageError(f"ranks {ranks} do not fit dims {tuple(dims)}")


def _summary(F, trace, Y=None, extra=None) -> dict:
    T = F.full()
    out = {
        "final_loss": trace.records[-1].loss,
        "iters": len(trace) - 1,
        "switch_iter": trace.switch_iter,
        "stop_reason": trace.stop_reason,
    }
    try:
        diag = estimate_signal_diagnostics(F)
        out.update(mu=diag["mu"], lambda_min=diag["lambda_min"], kappa=diag["kappa"])
    except ZeroDivisionError:
        out.update(mu=None, lambda_min=0.0, kappa=None)
    if Y is not None:
        ny = float(np.linalg.norm(Y.ravel()))
        out["rel_residual"] = float(np.linalg.norm((T - Y).ravel())) / ny if ny > 0 else 0.0
    out.update(extra or {})
    return out


def _write_outputs(out_dir, F, trace, summary) -> None:
    os.makedirs(out_dir, exist_ok=True)
    tio.save_factors(out_dir, F)
    trace.to_csv(os.path.join(out_dir, "trace.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_decompose(args) -> int:
    Y = _load(args.input, args.dims)
    _check_ranks(args.ranks, Y.shape)
    if args.max_iters < 1:
        raise UsageError("--max-iters must be >= 1")
    T0 = spectral_init(Y, InitConfig(args.ranks, args.tau, args.tau_rule))
    loss = _loss_from_args(args, T0.full(), Y)
    if args.trim and loss.kind is not LossKind.QUANTILE:
        raise UsageError("--trim requires --loss quantile")
    try:
        cfg = SolverConfig(
            loss, args.ranks, _schedule(args), max_iters=args.max_iters, tol=args.tol,
            tau1=args.tau1, tau2=args.tau2, enable_trim=args.trim, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    solve = rsgrad_quantile_trim if loss.kind is LossKind.QUANTILE else rsgrad
    F, trace = solve(Y, cfg, T0)
    _write_outputs(args.out, F, trace, _summary(F, trace, Y, {"loss": str(loss)}))
    print(f"{args.out}: {len(trace) - 1} iterations, final loss {trace.records[-1].loss:.6g}")
    return 0


def cmd_complete(args) -> int:
    if not os.path.isfile(args.input):
        raise FileNotFoundError(args.input)
    try:
        idx, vals, dims = tio.read_triplets(args.input, args.dims)
    except (OSError, ValueError) as exc:
        raise tio.TensorFormatError(args.input, str(exc)) from exc
    _check_ranks(args.ranks, dims)
    if args.folds is not None and args.iters is not None:
        raise UsageError("give --folds or --iters, not both")
    folds = args.folds if args.folds is not None else (args.iters + 1 if args.iters is not None else None)
    if folds is None:
        raise UsageError("--folds (or --iters) is required")
    if folds < 2:
        raise UsageError(f"need at least 2 folds (one for initialization), got {folds}")
    try:
        obs, dropped = ObservationSet.from_arrays(idx, vals, dims, folds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if dropped:
        log.warning("dropped %d trailing observations to form %d folds of %d", dropped, folds, obs.fold_size)
    T0 = completion_init(*obs.fold(0), dims, args.ranks)
    if args.loss == "pseudohuber" and args.delta is None:
        i0, v0 = obs.fold(0)
        loss = LossSpec.pseudo_huber(auto_delta(T0.full()[tuple(i0.T)], v0))
    else:
        loss = _loss_from_args(args)
    base = completion_config(args.ranks, loss)
    try:
        cfg = SolverConfig(loss, args.ranks, _schedule(args, base.schedule), tol=args.tol,
                           eta0_scale=base.eta0_scale, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    F, trace = complete_sample_split(obs, dims, cfg, T0)
    summary = _summary(F, trace, None, {"loss": str(loss), "folds": folds, "fold_size": obs.fold_size, "dropped": dropped})
    _write_outputs(args.out, F, trace, summary)
    print(f"{args.out}: {folds - 1} iterations on folds of {obs.fold_size}, {dropped} observations dropped")
    return 0


def cmd_synth(args) -> int:
    if len(args.dims) != len(args.ranks) or any(r > d for r, d in zip(args.ranks, args.dims)):
        raise UsageError(f"ranks {args.ranks} do not fit dims {args.dims}")
    if not 0 <= args.alpha < 1:
        raise UsageError("--alpha must lie in [0, 1)")
    noise = NoiseModel(args.noise, args.noise_scale, args.nu, args.shape)
    if args.snr is not None and noise.kind == "none":
        raise UsageError("--snr needs a noise model")
    F, diag = gen_lowrank(args.dims, args.ranks, args.seed, snr=args.snr, noise=noise if args.snr else None, fro=args.fro)
    os.makedirs(args.out, exist_ok=True)
    tio.save_factors(os.path.join(args.out, "truth"), F)
    T = F.full()
    tio.write_tensor(os.path.join(args.out, "truth.tnsr"), T)
    if args.observations is not None:
        if args.observations < 1:
            raise UsageError("--observations must be positive")
        obs = gen_observations(F, noise, args.alpha, args.observations, 1, args.seed + 1,
                               magnitude=args.magnitude, sign=args.sign)
        tio.write_observations(os.path.join(args.out, "observations.csv"), obs.indices, obs.values)
    else:
        Y = T + gen_noise(args.dims, noise, args.seed + 7919)
        if args.alpha > 0:
            model = CorruptionModel(args.alpha, args.magnitude, args.sign, seed=args.seed + 104729)
            Y = Y + gen_corruption(args.dims, model, float(np.max(np.abs(T))))
        tio.write_tensor(os.path.join(args.out, "observed.tnsr"), Y)
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        json.dump({**diag, "dims": list(args.dims), "ranks": list(args.ranks)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote synthetic data to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    if not os.path.isfile(args.spec):
        raise FileNotFoundError(args.spec)
    try:
        spec = ExperimentSpec.load(args.spec)
    except json.JSONDecodeError as exc:
        raise tio.TensorFormatError(args.spec, f"invalid JSON: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.spec}: invalid spec: {exc}") from None
    try:
        spec = override(
            spec, replications=args.replications, base_seed=args.seed, max_iters=args.max_iters,
            tol=args.tol, q=args.q, eta0=args.eta0, eta_const=args.eta,
        )
        if args.replications is not None or args.seed is not None:
            spec = replace(spec, seeds=None)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = args.out or spec.out or "."
    rows, failures = run_experiment(spec, out, resume=args.resume)
    print(f"{os.path.join(out, 'results.csv')}: {len(rows)} rows, {len(failures)} failed runs")
    if any("diverge" in f["error"] or "grew" in f["error"] for f in failures):
        return EXIT_DIVERGED
    return 0


def cmd_info(args) -> int:
    T = _load(args.input, args.dims)
    n = norms(T)
    out = {"dims": list(T.shape), "order": T.ndim, "fro": n["fro"], "l1": n["l1"], "sup": n["sup"]}
    if np.any(T):
        ranks = args.ranks
        if ranks is not None:
            _check_ranks(ranks, T.shape)
        try:
            out.update(estimate_signal_diagnostics(T, ranks))
        except ZeroDivisionError:
            out["kappa"] = None
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "decompose": cmd_decompose,
    "complete": cmd_complete,
    "synth": cmd_synth,
    "experiment": cmd_experiment,
    "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_FILE
    except tio.TensorFormatError as exc:
        print(f"error: malformed file {exc}", file=sys.stderr)
        return EXIT_FILE
    except IsADirectoryError as exc:
        print(f"error: {exc.filename} is a directory", file=sys.stderr)
        return EXIT_FILE
    except (DivergenceError, DegeneratePointError) as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
