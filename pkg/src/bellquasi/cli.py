"""Command-line entry point.

    bellquasi simulate   --config C [--paths N] [--dt DT] [--eps E] --out DIR
    bellquasi value      --config C [--paths N] [--eps E]
    bellquasi hjb        --config C [--grid-h H] [--eps E]
    bellquasi quasicheck --config C [--paths N] [--eps E1,E2,...]
    bellquasi barriers   --config C
    bellquasi verify     [--config C] [--seed S]
    bellquasi report     --out DIR

Exit codes: 0 success, 1 failed checks, 2 usage errors, 3 invalid config.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .problem_core import ConfigError, ProblemSpec, load_problem, normalize_domain_scale

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


@dataclass
class RunManifest:
    subcommand: str
    config: str | None
    seed: int
    out: str
    version: str
    wall_clock: float
    started: str
    argv: list


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    try:
        return max(1, int(os.environ.get("BQL_THREADS", "1")))
    except ValueError:
        return 1


def _floats(text: str) -> list:
    return [float(t) for t in text.split(",") if t.strip()]


def _start(problem: ProblemSpec, text) -> np.ndarray:
    if text:
        x = np.array(_floats(text))
        if x.shape != (problem.d,):
            raise ConfigError("--x0", f"need {problem.d} coordinates")
        return x
    from .quasi_engine import _anchor
    return _anchor(problem.domain)


def _need_config(args) -> ProblemSpec:
    if not args.config:
        raise ConfigError("--config", "required for this subcommand")
    return load_problem(args.config)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, out: Path) -> int:
    from .sde_engine import PolicySpec, SimConfig, simulate_batch, simulate_path, write_trace_csv
    from .rng import NoiseStream
    prob = _need_config(args)
    x0 = _start(prob, args.x0)
    cfg = SimConfig(dt=args.dt, t_max=args.t_max, policy=PolicySpec.constant(args.control), threads=_threads(args))
    eps = args.eps[0] if args.eps else 0.0
    res = simulate_batch(prob, cfg, x0, args.paths, args.seed, eps_reg=eps)
    with open(out / "paths.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "exit_time"] + [f"x{i + 1}" for i in range(prob.d)] + ["discount", "payoff", "truncated"])
        for i in range(args.paths):
            w.writerow([i, repr(float(res.exit_time[i]))] + [repr(float(v)) for v in res.exit_point[i]]
                       + [repr(float(res.discount[i])), repr(float(res.payoff[i])), int(res.truncated[i])])
    rec = simulate_path(prob, cfg, x0, NoiseStream(args.seed, 0), trace=True, eps_reg=eps)
    write_trace_csv(out / "trace_path0.csv", rec, prob.d)
    print(f"{args.paths} paths written to {out / 'paths.csv'}")
    return EXIT_OK


def _policies(prob, args):
    from .sde_engine import PolicySpec
    pols = [PolicySpec.constant(i) for i in range(len(prob.controls))]
    if len(prob.controls) > 1 and args.grid_h and prob.d <= 2:
        from .hjb_solver import solve
        eps = args.eps[0] if args.eps else 0.05
        pols.append(solve(prob, args.grid_h, eps).feedback_policy())
    return pols


def cmd_value(args, out: Path) -> int:
    from .sde_engine import SimConfig
    from .value_mc import ResultRow, estimate_value, write_results_csv
    prob = _need_config(args)
    x0 = _start(prob, args.x0)
    eps = args.eps[0] if args.eps else 0.0
    cfg = SimConfig(dt=args.dt, t_max=args.t_max, threads=_threads(args))
    est = estimate_value(prob, _policies(prob, args), x0, args.paths, cfg, seed=args.seed, eps_reg=eps)
    write_results_csv(out / "value.csv", [ResultRow("value", x0, np.zeros(prob.d), eps, est, args.seed)])
    print("mean,stderr")
    print(f"{est.mean!r},{est.stderr!r}")
    return EXIT_OK


def cmd_hjb(args, out: Path) -> int:
    from .hjb_solver import GENERATOR, estimate_checks, solve, test_directions, write_solution_csv
    from .problem_core import nondegeneracy
    prob = _need_config(args)
    eps = args.eps[0] if args.eps else 0.0
    sol = solve(prob, args.grid_h, eps, args.convention, args.scheme)
    write_solution_csv(out / "solution.csv", sol)
    x0 = _start(prob, args.x0)
    rep = nondegeneracy(prob, 360, test_directions(prob.d)) if prob.d == 2 else None
    checks = estimate_checks(sol, prob, rep)
    u0 = float(sol.value_at(x0, prob.g))
    doc = {"x0": x0.tolist(), "u_x0": u0, "howard_steps": sol.iterations, "eps_reg": eps,
           "convention": args.convention, "grid_h": args.grid_h, "n_cells": sol.grid.n,
           "residual_max": float(np.max(np.abs(sol.residual))), "estimates": checks}
    (out / "hjb_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"u({', '.join(f'{v:g}' for v in x0)}) = {u0!r}  ({sol.iterations} Howard steps)")
    return EXIT_OK


def _params(prob, args):
    from .quasi_engine import BarrierParams, calibrate_lambda
    if args.lam is not None:
        return BarrierParams.make(args.lam, args.theta, args.k1), None
    return calibrate_lambda(prob, n_samples=args.samples, seed=args.seed)


def cmd_quasicheck(args, out: Path) -> int:
    from .value_mc import ResultRow, coupling_first, coupling_second, write_results_csv
    prob = normalize_domain_scale(_need_config(args))
    pr, _ = _params(prob, args)
    x0 = _start(prob, args.x0)
    xi = np.zeros(prob.d)
    xi[-1] = 1.0
    eps_list = args.eps or [0.2, 0.1, 0.05]
    kw = dict(seed=args.seed, dt=args.dt, delta=args.delta)
    f1 = coupling_first(prob, x0, xi, eps_list, 1.0, args.paths, pr, **kw)
    f2 = coupling_second(prob, x0, xi, np.zeros(prob.d), eps_list, 1.0, args.paths, pr, **kw)
    rows = [ResultRow("coupling_first", x0, xi, e, est, args.seed) for e, est in zip(eps_list, f1)]
    rows += [ResultRow("coupling_second", x0, xi, e, est, args.seed) for e, est in zip(eps_list, f2)]
    write_results_csv(out / "quasicheck.csv", rows)
    print("experiment,eps,mean,stderr")
    for r in rows:
        print(f"{r.experiment},{r.eps:g},{r.est.mean:.6g},{r.est.stderr:.3g}")
    return EXIT_OK


def cmd_barriers(args, out: Path) -> int:
    from .quasi_engine import CalibrationError
    prob = normalize_domain_scale(_need_config(args))
    try:
        pr, cert = _params(prob, args)
    except CalibrationError as exc:
        (out / "barriers.json").write_text(json.dumps({"pass": False, "error": str(exc)}, indent=1) + "\n")
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if cert is None:
        from .quasi_engine import drift_certificate, drift_samples, psi_max, switching_check
        dom = prob.domain
        sw = switching_check(dom, pr, args.samples, args.seed)
        ds = drift_certificate(prob, pr, drift_samples(dom, pr.delta * 1.0001, pr.lam ** 2, args.samples, args.seed + 3), "B1")
        di = drift_certificate(prob, pr, drift_samples(dom, pr.lam, psi_max(dom) * 0.999, args.samples, args.seed + 4), "B2")
        cert = {"lambda": pr.lam, "theta": pr.theta, "k1": pr.k1, "nu": pr.nu, "drift_max_strip": ds,
                "drift_max_interior": di,
                "switching_margins": [sw["min_b1_minus_4b2"], sw["min_b2_minus_4b1"]], "n_samples": args.samples}
    tol = 1e-8 * prob.domain.scale
    cert["pass"] = bool(cert["drift_max_strip"] <= tol and cert["drift_max_interior"] <= tol
                        and min(cert["switching_margins"]) >= 0)
    cert["domain_scale"] = prob.domain.scale
    (out / "barriers.json").write_text(json.dumps(cert, indent=1, sort_keys=True) + "\n")
    print(json.dumps(cert, sort_keys=True))
    return EXIT_OK if cert["pass"] else EXIT_FAIL


def cmd_verify(args, out: Path) -> int:
    from .verify_harness import SuiteConfig, report_json, run_suite, summary_line
    prob = load_problem(args.config) if args.config else None
    checks = args.checks.split(",") if args.checks else None
    cfg = SuiteConfig(master_seed=args.seed, checks=checks)
    if args.dt is not None:
        cfg.dt = args.dt
    res = run_suite(prob, cfg, log=lambda m: print(m, file=sys.stderr))
    (out / "report.json").write_text(report_json(res))
    line = summary_line(res)
    print(line)
    if not res:
        return EXIT_FAIL
    return EXIT_OK if all(r.passed for r in res) else EXIT_FAIL


def cmd_report(args, out: Path) -> int:
    rows = []
    for p in sorted(out.glob("*.json")):
        if p.name.startswith("manifest") or p.name == "summary.json":
            continue
        doc = json.loads(p.read_text())
        if isinstance(doc, list):
            for r in doc:
                rows.append((p.name, r.get("check_id"), "pass" if r.get("pass") else "FAIL", r.get("statistic")))
        else:
            for k, v in sorted(doc.items()):
                if isinstance(v, (int, float, str, bool)):
                    rows.append((p.name, k, "", v))
    for p in sorted(out.glob("*.csv")):
        if p.name in ("summary.csv", "paths.csv", "solution.csv") or p.name.startswith("trace"):
            continue
        with open(p) as fh:
            for r in csv.DictReader(fh):
                if "mean" in r:
                    rows.append((p.name, f"{r.get('experiment')}@eps={r.get('eps')}", r.get("stderr"), r["mean"]))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "key", "status_or_stderr", "value"])
        w.writerows(rows)
    print(f"{len(rows)} rows written to {out / 'summary.csv'}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "value": cmd_value, "hjb": cmd_hjb, "quasicheck": cmd_quasicheck,
            "barriers": cmd_barriers, "verify": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bellquasi", description="Controlled diffusions: MC values, Bellman grid "
                                 "solver and quasiderivative checks.")
    sub = ap.add_subparsers(dest="cmd", metavar="subcommand")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="problem JSON")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--paths", type=int, default=10_000)
        p.add_argument("--dt", type=float, default=None if name == "verify" else 1e-3)
        p.add_argument("--eps", type=_floats, default=None, help="comma separated")
        p.add_argument("--grid-h", type=float, default=1 / 64)
        p.add_argument("--out", default=".")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--x0", default=None, help="start point, comma separated")
        if name in ("simulate", "value"):
            p.add_argument("--t-max", type=float, default=10.0)
        if name == "simulate":
            p.add_argument("--control", type=int, default=0)
        if name == "hjb":
            p.add_argument("--convention", choices=["GENERATOR", "REMARK"], default="GENERATOR")
            p.add_argument("--scheme", choices=["auto", "nine_point", "selling"], default="auto")
        if name in ("quasicheck", "barriers"):
            p.add_argument("--lam", type=float, default=None)
            p.add_argument("--theta", type=float, default=0.25)
            p.add_argument("--k1", type=float, default=16.0)
            p.add_argument("--samples", type=int, default=1000)
        if name == "quasicheck":
            p.add_argument("--delta", type=float, default=1.0, help="stop level on the normalized psi")
        if name == "verify":
            p.add_argument("--checks", default=None, help="comma separated check ids, e.g. c01,c11")
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    try:
        code = COMMANDS[args.cmd](args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"config error at $: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    man = RunManifest(args.cmd, args.config, args.seed, str(out), __version__,
                      round(time.perf_counter() - t0, 3), started, argv)
    (out / f"manifest_{args.cmd}.json").write_text(json.dumps(asdict(man), indent=1) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
