"""Command-line interface: run, fit, bounds, analyze, sweep.

Exit codes: 0 success, 2 invalid input, 3 runtime or numeric failure.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys

import numpy as np

from . import analysis, distributions, engine, problems, steppolicy
from .errors import (EngineError, InputError, NormalizationError, NumericError, ParameterError,
                     StaleSGDError, UnsupportedError)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParameterError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _emit(text, path):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- shared builders ---

def _delay(args):
    spec = getattr(args, "delay", None)
    if spec is None:
        return None
    if spec == "event":
        return engine.EventDelay(args.compute, args.compute_mean, args.compute_shape, args.apply_time)
    if spec == "zero":
        return distributions.Uniform(0)
    return distributions.parse_model(spec)


def _policy(args, model=None):
    if getattr(args, "policy_json", None):
        with open(args.policy_json, encoding="utf-8") as fh:
            text = fh.read()
        hist = distributions.StalenessHistogram.read_csv(args.norm_hist) if args.norm_hist else None
        return steppolicy.policy_from_json(text, hist)
    if args.policy:
        pol = steppolicy.parse_policy(args.policy, model)
    elif args.alpha is not None:
        pol = steppolicy.Constant(args.alpha)
    else:
        raise ParameterError("give --alpha or --policy")
    clip, cutoff = getattr(args, "clip", None), getattr(args, "cutoff", None)
    target = getattr(args, "normalize_to", None)
    if clip is not None or cutoff is not None:
        pol = steppolicy.clip_and_cutoff(pol, clip, cutoff, alpha_c=target)
    if target is not None:
        if not args.norm_hist:
            raise ParameterError("--normalize-to needs --norm-hist")
        pol = steppolicy.normalize(pol, distributions.StalenessHistogram.read_csv(args.norm_hist), target)
    return pol


def _add_policy_flags(p, normalization=True):
    p.add_argument("--alpha", type=float, help="constant step (shorthand for --policy constant:ALPHA)")
    p.add_argument("--policy", help="kind:params, e.g. poisson-tune:16,0.01,0.01")
    if normalization:
        p.add_argument("--policy-json", help="policy JSON file (overrides --policy)")
        p.add_argument("--normalize-to", type=float, help="target mean step alpha_c")
        p.add_argument("--norm-hist", help="staleness histogram CSV used for normalisation")
        p.add_argument("--clip", type=float, help="cap steps at CLIP * alpha_c")
        p.add_argument("--cutoff", type=int, help="skip updates with staleness above CUTOFF")


def _add_problem_flags(p, default="quad-1d"):
    p.add_argument("--problem", default=default,
                   help="quad-1d | quad:spectrum=1/2,sigma=0.1 | finite-sum:n=64,d=8 | mlp:hidden=16")
    p.add_argument("--batch", type=int, help="mini-batch size (finite-sum and MLP)")
    p.add_argument("--sigma", type=float, help="gradient noise level (quadratic)")


def _add_delay_flags(p):
    p.add_argument("--delay", help="staleness source: a model such as geom:0.5 or cmp:8,1, 'event' or 'zero'")
    p.add_argument("--compute", default="exponential", choices=("exponential", "gamma"))
    p.add_argument("--compute-mean", type=float, default=1.0)
    p.add_argument("--compute-shape", type=float, default=1.0)
    p.add_argument("--apply-time", type=float, default=0.5)


# --- subcommands ---

def _load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not JSON: {exc}") from None
    # a run summary carries the config under "config"
    spec = spec.get("config", spec) if isinstance(spec, dict) else spec
    if not isinstance(spec, dict):
        raise InputError(f"{path}: expected a JSON object")
    return engine.RunConfig.from_dict(spec)


def cmd_run(args):
    if args.config:
        cfg = _load_config(args.config)
        cfg.record_path = bool(args.path_out or args.momentum)
        prob = cfg.problem
    else:
        if args.steps is None:
            raise ParameterError("run: --steps is required unless --config is given")
        prob = problems.parse_problem(args.problem, args.batch, args.sigma)
        delay = _delay(args)
        pol = _policy(args, delay if isinstance(delay, distributions.StalenessModel) else None)
        cfg = engine.RunConfig(args.mode, prob, pol, args.steps, workers=args.workers, seed=args.seed,
                               stride=args.stride, delay=delay, history=args.history,
                               loss_threshold=args.loss_threshold, stop_at_threshold=args.stop_at_threshold,
                               record_path=bool(args.path_out or args.momentum))
    trace = engine.run(cfg)
    if args.trace:
        trace.write_csv(args.trace)
    if args.path_out:
        np.save(args.path_out, trace.path)
    summary = trace.summary()
    if args.momentum:
        summary["momentum"] = analysis.estimate_implicit_momentum(trace, prob).to_dict()
    _emit(_dump(summary), args.summary)
    return EXIT_OK


def cmd_fit(args):
    hist = distributions.StalenessHistogram.read_csv(args.hist)
    fams = distributions.FAMILIES if args.families == "all" else tuple(args.families.split(","))
    if "cmp" in fams and args.workers is None:
        fams = tuple(f for f in fams if f != "cmp")
        if not fams:
            raise ParameterError("the CMP fit needs --workers")
    reports = distributions.fit_families(hist, fams, args.workers)
    out = {"histogram": {"total": hist.total, "max_tau": hist.max_tau, "mean": hist.mean()},
           "workers": args.workers,
           "fits": [r.to_dict() for r in reports],
           "ranking": [r.family for r in reports]}
    _emit(_dump(out), args.out)
    return EXIT_OK


def cmd_bounds(args):
    inp = analysis.BoundsInput(args.c, args.L, args.M, args.eps, args.d0, args.tau_bar, args.theta,
                               args.E_alpha, args.E_tau_alpha, args.E_alpha2)
    out = {}
    if args.theta is not None and args.tau_bar is not None:
        alpha, rep = analysis.alpha_choice_and_bound(inp)
        out["constant_alpha"] = rep.to_dict()
        if args.E_alpha is None:
            # the general bound at the same constant step, as a consistency echo
            inp_c = analysis.BoundsInput(args.c, args.L, args.M, args.eps, args.d0, args.tau_bar,
                                         args.theta, alpha, args.tau_bar * alpha, alpha * alpha)
            out["general"] = analysis.bound_general(inp_c).to_dict()
    if args.E_alpha is not None:
        out["general"] = analysis.bound_general(inp).to_dict()
    if args.model:
        model = distributions.parse_model(args.model)
        pol = _policy(args, model)
        out["decaying_alpha"] = analysis.bound_decaying(model, pol, inp).to_dict()
    if not out:
        raise ParameterError("nothing to compute: give --theta and --tau-bar, the E-moments, or --model/--policy")
    _emit(_dump(out), args.out)
    return EXIT_OK


def cmd_analyze(args):
    if args.what == "drift":
        model = distributions.parse_model(args.model)
        pol = _policy(args, model)
        rep = analysis.drift_report(model, pol, args.imax)
        out = rep.to_dict()
        if not args.full:
            out.pop("w"), out.pop("d")
    else:
        prob = problems.parse_problem(args.problem, args.batch, args.sigma)
        if args.path:
            est = analysis.estimate_implicit_momentum(np.load(args.path), prob, args.warmup)
            out = {"estimates": [est.to_dict()], "mean_mu": est.mu}
        else:
            delay = _delay(args)
            if delay is None:
                raise ParameterError("analyze momentum needs --path or --delay")
            pol = _policy(args, delay if isinstance(delay, distributions.StalenessModel) else None)
            ests = []
            for s in args.seeds:
                cfg = engine.RunConfig("async-simulated", prob, pol, args.steps, workers=args.workers,
                                       seed=s, stride=max(args.steps // 10, 1), delay=delay,
                                       record_path=True)
                ests.append(analysis.estimate_implicit_momentum(engine.run(cfg), prob, args.warmup))
            mus = np.array([e.mu for e in ests])
            out = {"seeds": args.seeds, "estimates": [e.to_dict() for e in ests],
                   "mean_mu": float(mus.mean()),
                   "stderr_of_mean": float(mus.std(ddof=1) / math.sqrt(len(mus))) if len(mus) > 1 else None}
    _emit(_dump(out), args.out)
    return EXIT_OK


def cmd_sweep(args):
    prob = problems.parse_problem(args.problem, args.batch, args.sigma)
    delay = engine.EventDelay(args.compute, args.compute_mean, args.compute_shape, args.apply_time)
    thr = args.threshold
    if thr is None:
        if isinstance(prob, problems.FiniteSumProblem):
            thr = 1.001 * prob.optimal_loss()
        else:
            raise ParameterError("--threshold is required for this problem")
    rows = analysis.efficiency_sweep(prob, args.workers, args.alpha, thr, args.steps, args.repeats,
                                     args.adaptive, delay, args.seed, args.stride, args.pilot_steps,
                                     args.clip, args.cutoff)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workers", "policy", "median", "stddev", "reached", "repeats", "scale", "threshold"])
    for r in rows:
        w.writerow([r.workers, r.policy, repr(r.median), repr(r.stddev), r.reached, r.repeats,
                    repr(r.scale), repr(thr)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def build_parser():
    top = _Parser(prog="stalesgd", description="Staleness-adaptive asynchronous SGD toolkit")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run SGD and write a trace and a summary")
    p.add_argument("--mode", default="sequential",
                   help="seq | sync | sim (async-simulated) | threaded (async-threaded)")
    _add_problem_flags(p)
    _add_policy_flags(p)
    _add_delay_flags(p)
    p.add_argument("--config", help="rerun the config echoed in a summary JSON (other run flags ignored)")
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=1, help="evaluate loss every STRIDE updates")
    p.add_argument("--history", type=int, default=engine.DEFAULT_HISTORY)
    p.add_argument("--loss-threshold", type=float)
    p.add_argument("--stop-at-threshold", action="store_true")
    p.add_argument("--trace", help="trace CSV output path")
    p.add_argument("--summary", help="summary JSON output path (default stdout)")
    p.add_argument("--path-out", help="save the parameter path as .npy")
    p.add_argument("--momentum", action="store_true", help="append an implicit-momentum estimate")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="fit staleness models to a histogram CSV")
    p.add_argument("--hist", required=True, help="CSV with header tau,count")
    p.add_argument("--families", default="all", help="all or a comma list of geometric,uniform,poisson,cmp")
    p.add_argument("--workers", type=int, help="m for the CMP constraint lam = m**nu")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bounds", help="convergence-time bounds")
    for name in ("c", "L", "M", "eps", "d0"):
        p.add_argument(f"--{name}", type=float, required=True)
    p.add_argument("--tau-bar", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--E-alpha", dest="E_alpha", type=float)
    p.add_argument("--E-tau-alpha", dest="E_tau_alpha", type=float)
    p.add_argument("--E-alpha2", dest="E_alpha2", type=float)
    p.add_argument("--model", help="staleness model for the decaying-step bound")
    _add_policy_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("analyze", help="drift coefficients or implicit momentum")
    p.add_argument("what", choices=("drift", "momentum"))
    p.add_argument("--model", help="staleness model (drift)")
    p.add_argument("--imax", type=int, default=150)
    p.add_argument("--full", action="store_true", help="include the w and d sequences")
    _add_policy_flags(p)
    _add_problem_flags(p, default="quad:spectrum=20/50/100/200,sigma=1")
    _add_delay_flags(p)
    p.add_argument("--path", help=".npy parameter path from run --path-out")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="updates-to-threshold over worker counts, constant vs adaptive")
    _add_problem_flags(p, default="finite-sum:n=512,d=8,batch=8")
    p.add_argument("--workers", type=_int_list, required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.004, help="reference step alpha_c")
    p.add_argument("--adaptive", default="poisson-tune", choices=("poisson-tune", "cmp-zero", "inverse-tau"))
    p.add_argument("--threshold", type=float, help="loss threshold (finite-sum default 1.001 f*)")
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--pilot-steps", type=int, default=5000)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--cutoff", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compute", default="exponential", choices=("exponential", "gamma"))
    p.add_argument("--compute-mean", type=float, default=1.0)
    p.add_argument("--compute-shape", type=float, default=1.0)
    p.add_argument("--apply-time", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return top


_VALIDATION = (ParameterError, InputError, UnsupportedError, NormalizationError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _VALIDATION as exc:
        return _fail(exc, EXIT_VALIDATION)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_VALIDATION)
    except (NumericError, EngineError, FloatingPointError, StaleSGDError, ArithmeticError) as exc:
        return _fail(exc, EXIT_RUNTIME)


def _fail(exc, code):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, EngineError) and exc.partial is not None:
        err["partial_records"] = len(exc.partial)
    sys.stderr.write(json.dumps(err) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
