"""Acceptance suite: statistical bound tests, deterministic certificates and
convergence trends, each with its own seed derived from one master seed.

Reports are JSON lists of CheckResult sorted by check id. Wall-clock times
are kept out of the report so two runs with the same seed give identical
bytes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .hjb_solver import (GENERATOR, continuation_in_eps, estimate_checks, make_grid, solve,
                         test_directions)
from .problem_core import ProblemSpec, nondegeneracy, normalize_domain_scale, tp1, tp2
from .quasi_engine import (BarrierParams, StopSpec, barrier_B1, barrier_B2, barrier_envelopes,
                           calibrate_lambda, pproperty_residual, run_coupled)
from .sde_engine import PolicySpec, SimConfig
from .value_mc import (Estimate, coupling_first, coupling_second, estimate_value, exit_moments,
                       representation_first, theorem_bound_check)

DETERMINISTIC = "DETERMINISTIC"
STATISTICAL = "STATISTICAL"
TREND = "TREND"


@dataclass
class CheckResult:
    check_id: str
    kind: str
    statistic: float
    threshold: float
    passed: bool
    seed: int
    provenance: str
    stderr: Optional[float] = None
    n: Optional[int] = None
    tol: Optional[float] = None
    detail: dict = field(default_factory=dict)
    runtime: float = field(default=0.0, compare=False)

    @property
    def criterion(self) -> int:
        return int(self.check_id[1:3])

    def to_json(self) -> dict:
        out = {"check_id": self.check_id, "kind": self.kind, "statistic": _num(self.statistic),
               "threshold": _num(self.threshold), "pass": bool(self.passed), "seed": int(self.seed),
               "provenance": self.provenance, "detail": _clean(self.detail)}
        if self.kind == STATISTICAL:
            out["stderr"] = _num(self.stderr)
            out["n"] = self.n
        if self.kind == DETERMINISTIC:
            out["tol"] = _num(self.tol)
        return out


def _num(v):
    if v is None:
        return None
    v = float(v)
    if math.isnan(v) or math.isinf(v):
        return repr(v)
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# --------------------------------------------------------------------------
# generic tests


def one_sided_bound_test(samples, bound: float, slack: float = 0.0, check_id: str = "c00_bound",
                         seed: int = 0, provenance: str = "") -> CheckResult:
    """Pass iff mean <= bound + 3 stderr + slack (closed inequality)."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 30:
        raise ValueError(f"underpowered: {s.size} samples, need at least 30")
    est = Estimate.of(s)
    return _bound_result(est, bound, slack, check_id, seed, provenance)


def _bound_result(est: Estimate, bound: float, slack: float, check_id: str, seed: int,
                  provenance: str) -> CheckResult:
    thr = bound + 3 * est.stderr + slack
    return CheckResult(check_id, STATISTICAL, est.mean, thr, est.mean <= thr, seed, provenance,
                       est.stderr, est.n_paths, detail={"bound": bound, "slack": slack})


def bound_from_stats(mean: float, stderr: float, bound: float, slack: float = 0.0, n: int = 30,
                     check_id: str = "c00_bound", seed: int = 0, provenance: str = "") -> CheckResult:
    """one_sided_bound_test on summary statistics."""
    if n < 30:
        raise ValueError(f"underpowered: {n} samples, need at least 30")
    return _bound_result(Estimate(mean, stderr, n), bound, slack, check_id, seed, provenance)


def trend_test(values: Sequence[float], direction: str = "decreasing", tolerance_inversions: int = 0,
               stderr=0.0, check_id: str = "c00_trend", seed: int = 0, provenance: str = "") -> CheckResult:
    """Pass iff at most tolerance_inversions adjacent inversions exceed the noise.

    An inversion between neighbours i, i+1 counts when it is larger than the
    combined standard error sqrt(se_i^2 + se_{i+1}^2).
    """
    if direction != "decreasing":
        raise ValueError("only 'decreasing' trends are supported")
    v = [float(t) for t in values]
    if len(v) < 3:
        raise ValueError("trend_test needs at least 3 values")
    se = [float(stderr)] * len(v) if np.ndim(stderr) == 0 else [float(t) for t in stderr]
    inv = 0
    for i in range(len(v) - 1):
        if v[i + 1] - v[i] > math.hypot(se[i], se[i + 1]):
            inv += 1
    return CheckResult(check_id, TREND, float(inv), float(tolerance_inversions), inv <= tolerance_inversions,
                       seed, provenance, detail={"values": v, "stderr": se})


def _det(check_id, statistic, threshold, passed, seed, provenance, tol, **detail) -> CheckResult:
    return CheckResult(check_id, DETERMINISTIC, statistic, threshold, bool(passed), seed, provenance,
                       tol=tol, detail=detail)


def _within(est: Estimate, target: float, slack: float, check_id, seed, provenance) -> CheckResult:
    thr = 3 * est.stderr + slack
    gap = abs(est.mean - target)
    return CheckResult(check_id, STATISTICAL, gap, thr, gap <= thr, seed, provenance, est.stderr,
                       est.n_paths, detail={"mean": est.mean, "target": target})


# --------------------------------------------------------------------------
# configuration


@dataclass
class SuiteConfig:
    master_seed: int = 42
    checks: Optional[Sequence[str]] = None  # None = every registered check
    dt: float = 1e-3
    value_paths: int = 100_000
    moment_paths: int = 100_000
    bound_paths: int = 4000
    bound_probes: int = 16
    cert_samples: int = 1000
    girsanov_paths: int = 100_000
    repr_paths: int = 20_000
    repr_delta: float = 0.1  # stop level on the normalized psi
    coupling_paths: int = 1000
    coupling_delta: float = 1.0
    coupling_eps: tuple = (0.2, 0.1, 0.05)
    eta_paths: int = 1000
    hjb_h: float = 1 / 64
    hjb_eps: float = 0.05
    tp2_dirs: int = 32
    xval_probes: int = 10
    xval_paths: int = 10_000
    e2_kappa: float = 0.25
    nondeg_dirs: int = 360
    sm_starts: int = 32
    sm_paths: int = 2000
    runtime_limit: float = 60.0
    determinism: bool = True  # criterion 16 re-runs the suite


class _Ctx:
    """Lazily computed objects shared between checks."""

    def __init__(self, cfg: SuiteConfig, problem: Optional[ProblemSpec]):
        self.cfg = cfg
        self.problem = problem
        self._cache = {}

    def seed(self, label: str) -> int:
        return rng.derive_seed(self.cfg.master_seed, label)

    def get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def cert_problem(self) -> ProblemSpec:
        return self.get("cert_problem", lambda: normalize_domain_scale(self.problem or tp1(2)))

    @property
    def calibration(self):
        return self.get("calibration", lambda: calibrate_lambda(
            self.cert_problem, n_samples=self.cfg.cert_samples, seed=self.seed("calibration")))

    @property
    def tp1n(self) -> ProblemSpec:
        return self.get("tp1n", lambda: normalize_domain_scale(tp1(2)))

    @property
    def tp1_params(self) -> BarrierParams:
        if self.problem is None:
            return self.calibration[0]
        return self.get("tp1_cal", lambda: calibrate_lambda(
            self.tp1n, n_samples=self.cfg.cert_samples, seed=self.seed("calibration"))[0])

    def tp2_solution(self, h=None):
        h = h or self.cfg.hjb_h
        return self.get(("tp2", h), lambda: solve(tp2(self.cfg.tp2_dirs), h, self.cfg.hjb_eps, GENERATOR))


def _probes(problem: ProblemSpec, n: int, seed: int, min_psi: float = 0.05) -> np.ndarray:
    g = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x = g.uniform(problem.domain.box_lo, problem.domain.box_hi)
        if problem.domain.psi(x) >= min_psi:
            out.append(x)
    return np.array(out)


def _tp1_exact(d):
    return lambda y: (1 - (np.asarray(y) ** 2).sum(-1)) / (2 * d)


# --------------------------------------------------------------------------
# checks, one function per acceptance criterion


def check_value(ctx: _Ctx):
    cfg = ctx.cfg
    s = ctx.seed("c01")
    t0 = time.perf_counter()
    est = estimate_value(tp1(2), [PolicySpec.constant(0)], np.zeros(2), cfg.value_paths,
                         SimConfig(dt=cfg.dt), seed=s)
    rt = time.perf_counter() - t0
    r = _within(est, 0.25, 0.01, "c01_value_tp1", s, "value function definition (TP1 oracle)")
    r.runtime = rt
    r.passed = r.passed and rt < cfg.runtime_limit
    return [r]


def check_moments(ctx: _Ctx):
    cfg = ctx.cfg
    s = ctx.seed("c02")
    res = exit_moments(tp1(1), np.zeros(1), [1, 2], cfg.moment_paths, SimConfig(dt=cfg.dt), seed=s)
    prov = "exit-time moment bound"
    out = [_within(res[0].estimate, 0.5, 0.01, "c02_tau1_oracle", s, prov),
           _within(res[1].estimate, 5 / 12, 0.01, "c02_tau2_oracle", s, prov)]
    for r in res:
        out.append(bound_from_stats(r.estimate.mean, r.estimate.stderr, r.bound, 0.0, r.estimate.n_paths,
                                    f"c02_tau{r.n}_bound", s, prov))
    return out


def check_theorem_bound(ctx: _Ctx):
    cfg = ctx.cfg
    out = []
    for name, prob, pols in (("tp1", tp1(2), lambda: [PolicySpec.constant(0)]),
                             ("tp2", tp2(cfg.tp2_dirs),
                              lambda: [PolicySpec.constant(0), ctx.tp2_solution().feedback_policy()])):
        s = ctx.seed("c03" + name)
        probes = _probes(prob, cfg.bound_probes, s)
        policies = pols()
        ests = [estimate_value(prob, policies, x, cfg.bound_paths, SimConfig(dt=cfg.dt), seed=s + k)
                for k, x in enumerate(probes)]
        rows = theorem_bound_check(prob, probes, ests)
        worst = max(r["mean"] - r["bound"] - 3 * r["stderr"] for r in rows)
        out.append(CheckResult(f"c03_bound_{name}", STATISTICAL, worst, 0.0, all(r["pass"] for r in rows), s,
                               "value bound by the boundary data and psi",
                               max(r["stderr"] for r in rows), cfg.bound_paths,
                               detail={"n_probes": len(rows), "rows": rows}))
    return out


def check_drift(ctx: _Ctx):
    pr, cert = ctx.calibration
    tol = 1e-8 * ctx.cert_problem.domain.scale
    s = ctx.seed("calibration")
    prov = "barrier generator drift"
    common = {"lambda": pr.lam, "theta": pr.theta, "k1": pr.k1, "n_samples": cert["n_samples"]}
    return [_det("c04_drift_B1_strip", cert["drift_max_strip"], tol, cert["drift_max_strip"] <= tol, s, prov, tol,
                 **common),
            _det("c04_drift_B2_interior", cert["drift_max_interior"], tol, cert["drift_max_interior"] <= tol, s,
                 prov, tol, **common)]


def check_switching(ctx: _Ctx):
    pr, cert = ctx.calibration
    s = ctx.seed("calibration")
    m1, m2 = cert["switching_margins"]
    prov = "barrier switching inequalities"
    return [_det("c05_switch_at_lambda", m1, 0.0, m1 >= 0, s, prov, 0.0),
            _det("c05_switch_at_lambda2", m2, 0.0, m2 >= 0, s, prov, 0.0)]


def check_pproperty(ctx: _Ctx):
    prob = ctx.cert_problem
    s = ctx.seed("c06")
    n = ctx.cfg.cert_samples
    x = prob.sample_interior(n, s)
    g = np.random.default_rng(s + 1)
    xi = g.normal(size=(n, prob.d))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    worst = 0.0
    for c in prob.controls:
        worst = max(worst, float(np.max(np.abs(pproperty_residual(prob.domain, x, xi, c.sigma)))))
    return [_det("c06_pproperty", worst, 1e-10, worst <= 1e-10, s, "rotation identity for P", 1e-10,
                 n_samples=n)]


def check_girsanov(ctx: _Ctx):
    cfg = ctx.cfg
    s = ctx.seed("c07")
    res = run_coupled(ctx.tp1n, ctx.tp1_params, np.array([0.3, 0.0]), np.array([0.0, 1.0]), cfg.girsanov_paths,
                      s, cfg.dt, StopSpec(T=1.0, delta=cfg.repr_delta), eps=0.1)
    est = Estimate.of(np.exp(res.y.logp))
    return [_within(est, 1.0, 0.0, "c07_girsanov", s, "Girsanov density normalization")]


def check_representation(ctx: _Ctx):
    cfg = ctx.cfg
    out = []
    for tag, eps in (("eps0p1", 0.1), ("eps0", 0.0)):
        s = ctx.seed("c08" + tag)
        rep = representation_first(ctx.tp1n, [0.3, 0.0], [0.0, 1.0], eps, StopSpec(T=1.0, delta=cfg.repr_delta),
                                   cfg.repr_paths, ctx.tp1_params, _tp1_exact(2), seed=s, dt=cfg.dt)
        est = rep["rhs"]
        r = _within(est, rep["lhs"], 0.01, f"c08_representation_{tag}", s, "perturbed representation identity")
        out.append(r)
    return out


def check_coupling(ctx: _Ctx):
    cfg = ctx.cfg
    s = ctx.seed("c09")
    x, xi = np.array([0.3, 0.0]), np.array([0.0, 1.0])
    args = dict(seed=s, dt=cfg.dt, delta=cfg.coupling_delta)
    first = coupling_first(ctx.tp1n, x, xi, cfg.coupling_eps, 1.0, cfg.coupling_paths, ctx.tp1_params, **args)
    second = coupling_second(ctx.tp1n, x, xi, np.zeros(2), cfg.coupling_eps, 1.0, cfg.coupling_paths,
                             ctx.tp1_params, **args)
    out = []
    for name, ests, prov in (("first", first, "first-order coupling convergence"),
                             ("second", second, "second-order coupling convergence")):
        vals = [e.mean for e in ests]
        tr = trend_test(vals, "decreasing", 1, [e.stderr for e in ests], f"c09_{name}_trend", s, prov)
        ratio = vals[-1] / vals[0] if vals[0] > 0 else 0.0
        out.append(tr)
        out.append(_det(f"c09_{name}_ratio", ratio, 0.1, ratio < 0.1, s, prov, 0.0, values=vals,
                        eps=list(cfg.coupling_eps)))
    return out


def check_eta_tilde(ctx: _Ctx):
    cfg = ctx.cfg
    s = ctx.seed("c10")
    prob = ctx.tp1n
    starts = _probes(prob, cfg.eta_paths, s, 0.2 * prob.domain.scale)
    g = np.random.default_rng(s + 1)
    a = g.uniform(0, 2 * np.pi, cfg.eta_paths)
    xis = np.stack([np.cos(a), np.sin(a)], axis=1)
    res = run_coupled(prob, ctx.tp1_params, starts, xis, cfg.eta_paths, s, cfg.dt,
                      StopSpec(T=1.0, delta=cfg.repr_delta))
    worst = float(res.max_eta_tilde.max())
    thr = 10 * cfg.dt
    return [_det("c10_eta_tilde", worst, thr, worst <= thr, s, "vanishing adjoint second quasiderivative", thr,
                 n_paths=cfg.eta_paths)]


def check_hjb(ctx: _Ctx):
    cfg = ctx.cfg
    out = []
    t0 = time.perf_counter()
    s1 = solve(tp1(2), cfg.hjb_h)
    rt1 = time.perf_counter() - t0
    u1 = s1.value_at(np.zeros(2))
    r = _det("c11_hjb_tp1", abs(u1 - 0.25), 0.005, abs(u1 - 0.25) <= 0.005 and s1.iterations <= 50
             and rt1 < cfg.runtime_limit, 0, "Bellman equation (TP1 oracle)", 0.005, u0=u1,
             howard_steps=s1.iterations)
    r.runtime = rt1
    out.append(r)
    t0 = time.perf_counter()
    s2 = solve(tp2(cfg.tp2_dirs), cfg.hjb_h, cfg.hjb_eps, GENERATOR)
    rt2 = time.perf_counter() - t0
    u2 = s2.value_at(np.zeros(2))
    r = _det("c11_hjb_tp2", abs(u2 - 0.5), 0.02, abs(u2 - 0.5) <= 0.02 and s2.iterations <= 50
             and rt2 < cfg.runtime_limit, 0, "Bellman equation (TP2 oracle)", 0.02, u0=u2,
             howard_steps=s2.iterations, eps_reg=cfg.hjb_eps)
    r.runtime = rt2
    out.append(r)
    return out


def check_regularization(ctx: _Ctx):
    cfg = ctx.cfg
    grid = make_grid(tp2(cfg.tp2_dirs).domain, cfg.hjb_h)
    sols, deltas = continuation_in_eps(tp2(cfg.tp2_dirs), grid, [0.2, 0.1, 0.05, 0.025])
    return [trend_test(deltas, "decreasing", 0, 0.0, "c12_regularization_trend", 0,
                       "regularized value convergence")]


def check_crossval(ctx: _Ctx):
    cfg = ctx.cfg
    s = ctx.seed("c13")
    prob = tp2(cfg.tp2_dirs)
    sol = ctx.tp2_solution()
    pols = [PolicySpec.constant(0), sol.feedback_policy()]
    probes = _probes(prob, cfg.xval_probes, s, 0.1)
    worst, rows, ok = -math.inf, [], True
    for k, x in enumerate(probes):
        est = estimate_value(prob, pols, x, cfg.xval_paths, SimConfig(dt=cfg.dt), seed=s + k)
        u = sol.value_at(x)
        gap = abs(est.mean - u)
        thr = 3 * est.stderr + 5 * cfg.hjb_h
        ok &= gap <= thr
        worst = max(worst, gap - thr)
        rows.append({"x": x.tolist(), "mc": est.mean, "stderr": est.stderr, "pde": u})
    return [CheckResult("c13_mc_vs_pde", STATISTICAL, worst, 0.0, bool(ok), s, "Monte Carlo against the Bellman grid",
                        max(r["stderr"] for r in rows), cfg.xval_paths, detail={"rows": rows})]


def check_estimates(ctx: _Ctx):
    cfg = ctx.cfg
    prob = tp2(cfg.tp2_dirs)
    rep = nondegeneracy(prob, cfg.nondeg_dirs, test_directions(2))
    coarse = estimate_checks(ctx.tp2_solution(2 * cfg.hjb_h), prob, rep, cfg.e2_kappa)
    fine = estimate_checks(ctx.tp2_solution(cfg.hjb_h), prob, rep, cfg.e2_kappa)
    out = []
    for key, prov in (("N_e1", "gradient estimate near the boundary"),
                      ("N_e3_lower", "second-derivative lower estimate"),
                      ("N_e3_upper", "second-derivative upper estimate")):
        a, b = coarse[key], fine[key]
        if a is None or b is None:
            out.append(_det(f"c14_{key}", math.nan, 2.0, False, 0, prov, 0.0, reason=fine["e3_upper"]))
            continue
        if a == 0 and b == 0:
            ratio = 1.0
        elif a == 0 or b == 0:
            ratio = math.inf
        else:
            ratio = max(a / b, b / a)
        out.append(_det(f"c14_{key}", ratio, 2.0, ratio < 2.0, 0, prov, 0.0, coarse=a, fine=b))
    lo = math.cos(math.pi / 32) ** 2
    out.append(_det("c14_mu_hat", rep.mu, lo, lo <= rep.mu <= 1.0 + 1e-12, 0, "weak nondegeneracy constant",
                    1e-12, n_dirs=cfg.nondeg_dirs))
    e2 = fine["e2"]
    thr = -10 * cfg.hjb_h
    me = e2["min_eig"] if e2["min_eig"] is not None else -math.inf
    out.append(_det("c14_e2_convexity", me, thr, me >= thr, 0, "convexity of the corrected value", 0.0,
                    N=e2["N"], kappa=e2["kappa"], n_cells=e2["n_cells"]))
    return out


def check_supermartingale(ctx: _Ctx):
    cfg = ctx.cfg
    prob = ctx.tp1n
    dom = prob.domain
    pr = ctx.tp1_params
    s = ctx.seed("c15")
    starts = _probes(prob, cfg.sm_starts, s, 0.3)
    g = np.random.default_rng(s + 1)
    worst_a = worst_e = -math.inf
    ok_a = ok_e = True
    for k, x in enumerate(starts):
        a = g.uniform(0, 2 * np.pi)
        xi = np.array([np.cos(a), np.sin(a)])
        res = run_coupled(prob, pr, x, xi, cfg.sm_paths, s + k, cfg.dt,
                          StopSpec(T=1.0, delta=cfg.repr_delta, region_exit=True, interp=True))
        boundary = float(dom.psi(x)) <= pr.lam ** 2
        bar = barrier_B1 if boundary else barrier_B2
        b0 = float(bar(dom, x, xi, pr))
        est = Estimate.of(bar(dom, res.x, res.q.xi, pr))
        thr = 1.05 * b0 + 3 * est.stderr
        ok_a &= est.mean <= thr
        worst_a = max(worst_a, (est.mean - thr) / b0)
        up0, _ = barrier_envelopes(dom, x, xi, pr)
        _, lo = barrier_envelopes(dom, res.x, res.q.xi, pr)
        el = Estimate.of(lo)
        thr_e = 2 * up0 + 3 * el.stderr + 0.05 * 2 * up0
        ok_e &= el.mean <= thr_e
        worst_e = max(worst_e, (el.mean - thr_e) / up0)
    return [CheckResult("c15_active_barrier", STATISTICAL, worst_a, 0.0, bool(ok_a), s,
                        "barrier supermartingale property", None, cfg.sm_paths, detail={"starts": cfg.sm_starts}),
            CheckResult("c15_envelope", STATISTICAL, worst_e, 0.0, bool(ok_e), s, "barrier envelope comparison",
                        None, cfg.sm_paths, detail={"starts": cfg.sm_starts})]


REGISTRY: dict = {
    "c01": check_value, "c02": check_moments, "c03": check_theorem_bound, "c04": check_drift,
    "c05": check_switching, "c06": check_pproperty, "c07": check_girsanov, "c08": check_representation,
    "c09": check_coupling, "c10": check_eta_tilde, "c11": check_hjb, "c12": check_regularization,
    "c13": check_crossval, "c14": check_estimates, "c15": check_supermartingale,
}


def run_suite(problem: Optional[ProblemSpec] = None, config: Optional[SuiteConfig] = None,
              log: Optional[Callable[[str], None]] = None) -> list:
    """Run the registered checks (criterion 16 re-runs everything and compares).

    problem, when given, replaces TP1 in the certificate checks (c04-c06).
    """
    cfg = config or SuiteConfig()
    ids = list(REGISTRY) + ["c16"] if cfg.checks is None else list(cfg.checks)
    unknown = [c for c in ids if c not in REGISTRY and c != "c16"]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}")
    if problem is not None:
        problem.validate()
    results = _run(problem, cfg, [c for c in ids if c != "c16"], log)
    if "c16" in ids:
        if log:
            log("c16: second run for the determinism check")
        again = _run(problem, cfg, [c for c in ids if c != "c16"], None)
        a, b = report_json(results), report_json(again)
        same = a == b
        results.append(_det("c16_determinism", 0.0 if same else 1.0, 0.0, same, cfg.master_seed,
                            "reproducibility contract", 0.0, report_bytes=len(a.encode())))
    return sorted(results, key=lambda r: r.check_id)


def _run(problem, cfg, ids, log):
    ctx = _Ctx(cfg, problem)
    out = []
    for cid in sorted(ids):
        t0 = time.perf_counter()
        res = REGISTRY[cid](ctx)
        if log:
            log(f"{cid}: {'ok' if all(r.passed for r in res) else 'FAIL'} ({time.perf_counter() - t0:.1f} s)")
        out.extend(res)
    return out


def report_json(results: Sequence[CheckResult]) -> str:
    return json.dumps([r.to_json() for r in sorted(results, key=lambda r: r.check_id)], indent=1,
                      sort_keys=True) + "\n"


def summary_line(results: Sequence[CheckResult]) -> str:
    if not results:
        return "NO CHECKS"
    k = sum(bool(r.passed) for r in results)
    return f"PASS {k}/{len(results)}"


def by_criterion(results: Sequence[CheckResult]) -> dict:
    out = {}
    for r in results:
        out.setdefault(r.criterion, []).append(r)
    return out
