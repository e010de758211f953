"""Command-line front end: ``python -m dynchance <command> ...``.

Exit status is 0 on success, 2 when a solve or verification ends without
success, and 1 on any input or runtime error.  Errors are printed to stderr
as the single line ``error: CODE: message``.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io
from .gaussian import GaussianSpec
from .problems import build_problem
from .projection import InfeasibleStage, project_box, project_scenario
from .reformulation import box_bounds
from .solver import SolverOptions
from .timeseries import ModelError, compact_form, decompose_coefficients, simulate_paths

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same one-line format as every other failure."""

    def error(self, message):
        print(f"error: E_USAGE: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def _emit(obj, out):
    text = io.dump_json(obj, out)
    if out is None:
        sys.stdout.write(text)


def _compact(model):
    try:
        dec = decompose_coefficients(model)
        return dec, compact_form(dec, model)
    except ModelError as exc:
        raise CliError("E_MODEL", str(exc)) from None


def cmd_decompose(args):
    model = io.load_model(args.model)
    dec, cf = _compact(model)
    per_stage = []
    for t in range(model.T):
        per_stage.append({
            "stage": t + 1,
            "c": dec.c[t].tolist(),
            "gamma": [g.tolist() for g in dec.gamma[t]],
            "delta": [d.tolist() for d in dec.delta[t]],
            "theta": [th.tolist() for th in dec.theta[t]],
            "mu_tilde": cf.mu_tilde[t].tolist(),
            "Theta": cf.Theta[t].tolist(),
        })
    _emit({"T": model.T, "M": model.M, "r": np.asarray(dec.r).tolist(), "s": np.asarray(dec.s).tolist(),
           "stages": per_stage}, args.out)
    return EXIT_OK


def cmd_simulate(args):
    model = io.load_model(args.model)
    if args.paths < 1:
        raise CliError("E_ARG", "--paths must be positive")
    xi, eps = simulate_paths(model, args.paths, seed=args.seed)
    _emit({"seed": args.seed, "xi": xi.tolist(), "eps": eps.tolist()}, args.out)
    return EXIT_OK


def _load_run(args):
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.qmc_points is not None:
        cfg.qmc_points = args.qmc_points
    for flag, key in (("starts", "starts"), ("max_iter", "max_iter"), ("kkt_tol", "kkt_tol")):
        if getattr(args, flag, None) is not None:
            cfg.solver[key] = getattr(args, flag)
    _, cf = _compact(cfg.model)
    return cfg, cf


def cmd_solve(args):
    cfg, cf = _load_run(args)
    spec = GaussianSpec(cf.Sigma)
    try:
        inst = build_problem(cfg.kind, cfg.stage, cf, spec, trunc=cfg.truncation, saa_n=cfg.saa_n,
                             seed=cfg.seed, qmc_points=cfg.qmc_points)
    except ValueError as exc:
        raise CliError("E_PRECONDITION", str(exc)) from None
    opts = SolverOptions(seed=cfg.seed, **cfg.solver)
    report = inst.solve(opts)
    out = report.to_dict()
    out["policy"] = io.policy_to_dict(inst.rule(report.x))
    out["config"] = {"kind": cfg.kind, "p": cfg.stage.p, "seed": cfg.seed, "qmc_points": cfg.qmc_points,
                     "saa_n": cfg.saa_n, "solver": dict(sorted(cfg.solver.items()))}
    _emit(out, args.out or cfg.out)
    if not report.success:
        print(f"solve failed: {report.message}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_project(args):
    cfg, _ = _load_run(args)
    stage = cfg.stage
    rule = io.load_policy(args.policy, stage.n, stage.M)
    xi = io.load_scenarios(args.scenarios, stage.T, stage.M)
    bounds = box_bounds(stage)
    rows, flagged = [], 0
    for i, s in enumerate(xi):
        if bounds is not None:
            z = project_box(rule, s, bounds)
            rows.append({"scenario": i, "z": [zt.tolist() for zt in z]})
            continue
        try:
            z = project_scenario(rule, s, stage, scenario=i)
            rows.append({"scenario": i, "z": [zt.tolist() for zt in z]})
        except InfeasibleStage as exc:
            flagged += 1
            rows.append({"scenario": i, "infeasible_stage": exc.stage, "farkas_ray": np.asarray(exc.ray).tolist()})
        except ValueError as exc:
            raise CliError("E_PRECONDITION", str(exc)) from None
    y = rule.evaluate(xi)
    _emit({"method": "clip" if bounds is not None else "qp", "infeasible": flagged,
           "unprojected": [[yt[i].tolist() for yt in y] for i in range(xi.shape[0])],
           "rows": rows}, args.out)
    return EXIT_OK


def cmd_verify(args):
    from .suites import SUITES, run_suite

    if args.suite not in SUITES:
        raise CliError("E_SUITE", f"unknown suite '{args.suite}'; available: {', '.join(sorted(SUITES))}")
    result = run_suite(args.suite, seed=args.seed if args.seed is not None else 0)
    _emit(result, args.out)
    return EXIT_OK if result["passed"] else EXIT_FAILED


def build_parser():
    parser = _Parser(prog="dynchance", description="Linear decision rules under joint chance constraints.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("decompose", help="causal coefficients and compact form of a time-series model")
    p.add_argument("model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("simulate", help="simulate paths by direct recursion")
    p.add_argument("model")
    p.add_argument("--paths", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (("solve", cmd_solve, "build and solve a formulation"),
                             ("project", cmd_project, "apply the hard-constraint projection to scenarios")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--qmc-points", type=int, dest="qmc_points")
        p.add_argument("--out")
        if name == "solve":
            p.add_argument("--starts", type=int)
            p.add_argument("--max-iter", type=int, dest="max_iter")
            p.add_argument("--kkt-tol", type=float, dest="kkt_tol")
        else:
            p.add_argument("--policy", required=True)
            p.add_argument("--scenarios", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run a built-in verification suite")
    p.add_argument("suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (io.InputError, CliError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: E_RUNTIME: {msg}", file=sys.stderr)
    except Exception as exc:  # keep the one-line contract even for bugs
        msg = str(exc).replace("\n", " ")
        print(f"error: E_INTERNAL: {type(exc).__name__}: {msg}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
