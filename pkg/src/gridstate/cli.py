"""Command-line entry point: ``gridstate <command> [options]``.

Exit codes: 0 on success, 1 when a solver fails, 2 on configuration errors
(unknown case, bad flag values, missing files).  Output is deterministic for
fixed seeds; runtimes are printed only with ``--timing``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bench import (
    ConfigError,
    ExperimentConfig,
    parse_seeds,
    records_jsonl,
    run_benchmark,
    run_once,
    simulate_measurements,
    summarize,
    summary_csv,
)
from .estimation import EstimationError
from .measurements import read_jsonl, write_jsonl
from .network import load_case, solve_power_flow


class _Fail(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _write(text, path):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise _Fail(f"cannot write {path}: {exc}", 2) from None


def _config(args, seeds) -> ExperimentConfig:
    return ExperimentConfig(
        case=args.case,
        noise=args.noise,
        p_f=args.pf,
        estimator=args.estimator,
        seeds=seeds,
        time_limit=args.time_limit,
        d_factor=args.d_factor,
        order=getattr(args, "order", 2),
        delta=getattr(args, "delta", 1e-6),
        pmu_buses=tuple(args.pmu or ()),
    )


def _network(case):
    try:
        return load_case(case)
    except (OSError, ValueError) as exc:
        raise _Fail(f"cannot load case {case!r}: {exc}", 2) from None


def cmd_estimate(args):
    cfg = _config(args, (args.seed,))
    if len(cfg.estimators) != 1:
        raise ConfigError("estimate takes a single estimator; use benchmark for several")
    net = _network(args.case)
    v = solve_power_flow(net)
    ms = None
    if args.measurements:
        try:
            ms = read_jsonl(args.measurements)
        except (OSError, ValueError, KeyError) as exc:
            raise _Fail(f"cannot read measurements: {exc}", 2) from None
    rec = run_once(cfg, args.seed, cfg.estimators[0], net=net, measurements=ms, truth=v)
    if not args.timing:
        rec.pop("runtime", None)
    _write(json.dumps(rec, sort_keys=True, indent=1) + "\n", args.out)
    if rec["status"] != "ok":
        raise _Fail(rec.get("error", "solver failed"), 1)


def cmd_simulate(args):
    cfg = _config(args, (args.seed,))
    net = _network(args.case)
    if args.steps:
        from .tracking import load_stream, write_stream

        if not args.out:
            raise ConfigError("a stream needs --out DIR")
        stream, _, _ = load_stream(net, args.steps, args.amplitude, args.seed,
                                   jump_at=args.jump_at, noise=args.stream_noise)
        write_stream(stream, args.out)
        return
    v = solve_power_flow(net)
    _write(write_jsonl(simulate_measurements(net, v, cfg, args.seed)), args.out)


def cmd_benchmark(args):
    cfg = _config(args, parse_seeds(args.seeds))
    records = run_benchmark(cfg)
    _write(summary_csv(summarize(records), timing=args.timing), args.out)
    if args.raw:
        _write(records_jsonl(records, timing=args.timing), args.raw)
    if any(r["status"] != "ok" for r in records):
        raise _Fail("some runs failed (see the failures column)", 1)


def cmd_relax(args):
    from .bench import simulate_measurements as sim
    from .estimation import EstimationProblem
    from .sdp import build_moment_sdp, estimation_pop, export_sdpa, extract_candidate, solve_sdp

    cfg = _config(args, (args.seed,))
    net = _network(args.case)
    if args.measurements:
        try:
            ms = read_jsonl(args.measurements)
        except (OSError, ValueError, KeyError) as exc:
            raise _Fail(f"cannot read measurements: {exc}", 2) from None
    else:
        ms = sim(net, solve_power_flow(net), cfg, args.seed)
    pop = estimation_pop(EstimationProblem(net, ms), form=args.form)
    try:
        sdp = build_moment_sdp(pop, args.order, args.delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.export_sdpa:
        _write(export_sdpa(sdp), args.export_sdpa)
    if not args.solve:
        return
    sol = solve_sdp(sdp)
    cand = extract_candidate(sol.y, sdp.basis, pop)
    out = {"status": sol.status, "bound": sol.bound, "dual_bound": sol.dual_bound,
           "iterations": sol.iterations, "moments": sdp.n_moments, "blocks": len(sdp.blocks),
           "rank_one": cand is not None}
    if cand is not None:
        out["candidate"] = [[float(z.real), float(z.imag)] for z in cand]
    _write(json.dumps(out, sort_keys=True, indent=1) + "\n", args.out)
    if sol.status in ("failed", "infeasible", "unbounded"):
        raise _Fail(f"SDP solve ended with status {sol.status}", 1)


def cmd_track(args):
    from .tracking import TrackingError, TrackingOptions, load_stream_sets, run_trajectory

    net = _network(args.case)
    if not os.path.isdir(args.stream):
        raise ConfigError(f"stream directory {args.stream!r} does not exist")
    try:
        stream = load_stream_sets(args.stream)
        opts = TrackingOptions(mode=args.mode, threshold=args.threshold, seed=args.seed)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        report = run_trajectory(stream, net, opts)
    except TrackingError as exc:
        raise _Fail(str(exc), 1) from None
    _write(report.to_csv(), args.out)
    for note in report.notes:
        print(note, file=sys.stderr)


def _common(p, estimator="wls"):
    p.add_argument("--case", default="case14", help="bundled case name or path to a .m file")
    p.add_argument("--noise", default="none", choices=("none", "gaussian", "faulty"))
    p.add_argument("--pf", type=float, default=None, help="fault probability (faulty noise)")
    p.add_argument("--d-factor", type=float, default=None,
                   help="budget d = floor(factor * L) for robust estimation")
    p.add_argument("--estimator", default=estimator,
                   help="wls | multistart[:k] | robust[:factor] | lasso[:r] | sdp")
    p.add_argument("--time-limit", type=float, default=None, help="seconds per robust solve")
    p.add_argument("--pmu", type=int, nargs="*", help="buses carrying a PMU")
    p.add_argument("--out", default=None, help="output file (stdout by default)")
    p.add_argument("--timing", action="store_true", help="include wall-clock runtimes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridstate", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="simulate one measurement set and estimate the state")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--measurements", help="read measurements from a JSONL file instead")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--delta", type=float, default=1e-6)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="write simulated measurements as JSONL")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=0, help="write a stream of this many steps to --out DIR")
    p.add_argument("--amplitude", type=float, default=0.01, help="relative load drift per step")
    p.add_argument("--jump-at", type=int, default=None, help="step of a load discontinuity")
    p.add_argument("--stream-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="summary table over seeds")
    _common(p, estimator="wls,multistart")
    p.add_argument("--seeds", default="0..9", help='"0..9" or "0,3,7" (at least two)')
    p.add_argument("--raw", help="also write per-seed records as JSONL")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--delta", type=float, default=1e-6)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("relax", help="build (and optionally solve) the moment relaxation")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--measurements")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--form", default="w", choices=("w", "u", "x"))
    p.add_argument("--export-sdpa", metavar="PATH", help='SDPA output file ("-" for stdout)')
    p.add_argument("--solve", action="store_true")
    p.set_defaults(func=cmd_relax)

    p = sub.add_parser("track", help="track a stream directory of step_<k>.jsonl files")
    p.add_argument("stream")
    p.add_argument("--case", default="case14")
    p.add_argument("--mode", default="wls-warm", choices=("wls-warm", "sdp-warm", "cold"))
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_track)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.func(args)
    except _Fail as exc:
        print(f"gridstate: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"gridstate: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"gridstate: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
