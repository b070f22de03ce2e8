"""Monte Carlo estimators of the value function and of its derivatives.

All reductions use math.fsum over per-path samples, so results do not depend
on how paths were split into blocks.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .problem_core import ProblemSpec, generator_on_psi
from .quasi_engine import BarrierParams, StopSpec, run_coupled
from .sde_engine import PolicySpec, SimConfig, simulate_batch

__all__ = [
    "Estimate", "PolicySpec", "MomentResult", "estimate_value", "estimate_value_regularized",
    "fd_directional", "representation_first", "coupling_first", "coupling_second", "exit_moments",
    "theorem_bound_check", "normal_derivative_probe", "regularization_diagnostic",
    "ResultRow", "write_results_csv", "psi_normalizer", "BRIDGE_OVERSHOOT",
]

# mean overshoot of a discretely monitored Brownian motion, in units of sigma sqrt(dt)
BRIDGE_OVERSHOOT = 0.5826

MULTI_CONTROL_NOTE = "sup over a finite policy family: a lower bound on v"


@dataclass
class Estimate:
    mean: float
    stderr: float
    n_paths: int
    bias_bound: float = 0.0
    note: str = ""

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("n_paths must be >= 2")
        if self.stderr < 0 or self.bias_bound < 0:
            raise ValueError("stderr and bias_bound must be nonnegative")

    @staticmethod
    def of(samples, bias_bound: float = 0.0, note: str = "") -> "Estimate":
        s = np.asarray(samples, dtype=float).ravel()
        n = s.size
        if n < 2:
            raise ValueError("need at least two samples")
        m = math.fsum(s) / n
        var = math.fsum((s - m) ** 2) / (n - 1)
        return Estimate(m, math.sqrt(var / n), n, bias_bound, note)


@dataclass
class MomentResult:
    n: int
    estimate: Estimate
    bound: float

    @property
    def holds(self) -> bool:
        return self.estimate.mean <= self.bound + 3 * self.estimate.stderr


# --------------------------------------------------------------------------
# helpers


def psi_normalizer(problem: ProblemSpec, n: int = 512, seed: int = 0) -> float:
    """m = min over samples and controls of -L psi (positive on valid problems)."""
    pts = problem.sample_interior(n, seed)
    lpsi = generator_on_psi(problem, pts)
    m = float(-lpsi.max())
    if not m > 0:
        raise ValueError("L psi is not negative on D")
    return m


def _sup_psi(problem: ProblemSpec, n: int = 4096) -> float:
    pts = problem.sample_interior(n, 1)
    return float(np.max(problem.domain.psi(pts)))


def _check_start(problem: ProblemSpec, x, level: float = 0.0):
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.d,):
        raise ValueError("start point has wrong dimension")
    if not problem.domain.psi(x) > level:
        raise ValueError("start point not in D")
    return x


def _bias_bound(problem: ProblemSpec, x, config: SimConfig) -> float:
    """Truncation tail plus an exit-detection budget.

    With psi' = psi / m (so L psi' <= -1) the exit-time moments satisfy
    E tau^n <= n! |psi'|^(n-1) psi'(x), giving
    E (tau - T)^+ <= E tau^n / T^(n-1) and P(tau > T) <= E tau^n / T^n.
    """
    m = psi_normalizer(problem)
    sp = _sup_psi(problem) / m
    px = float(problem.domain.psi(x)) / m
    T = config.t_max
    pts = problem.sample_interior(1024, 2)
    fsup = max(c.f.sup_abs(pts) for c in problem.controls)
    gsup = problem.g.sup_abs(pts)
    best = math.inf
    for n in range(1, 16):
        mom = math.factorial(n) * sp ** (n - 1) * px
        best = min(best, gsup * mom / T ** n + fsup * mom / T ** (n - 1))
    dg = float(np.max(np.linalg.norm(problem.g.grad(pts), axis=1)))
    dpsi = float(np.max(np.linalg.norm(problem.domain.grad(pts), axis=1))) / m
    smax = max(c.sigma_norm() for c in problem.controls)
    budget = BRIDGE_OVERSHOOT * (dg + fsup * dpsi) * smax * math.sqrt(config.dt)
    return best + budget


def _policy_payoffs(problem, policy, x, n_paths, config, seed, eps_reg=0.0):
    cfg = replace(config, policy=policy)
    return simulate_batch(problem, cfg, x, n_paths, seed, eps_reg=eps_reg).payoff


# --------------------------------------------------------------------------
# value estimates


def _best_policy(problem, policies, x, n_paths, config, seed, eps_reg):
    if not policies:
        raise ValueError("policies must be non-empty")
    best = None
    for pol in policies:
        pay = _policy_payoffs(problem, pol, x, n_paths, config, seed, eps_reg)
        est = Estimate.of(pay)
        if best is None or est.mean > best[0].mean:
            best = (est, pay, pol)
    return best


def estimate_value(problem: ProblemSpec, policies: Sequence[PolicySpec], x, n_paths: int,
                   config: SimConfig, seed: int = 0, eps_reg: float = 0.0) -> Estimate:
    """Max over policies of the MC mean payoff; all policies share the same noise."""
    x = _check_start(problem, x, config.level)
    best = _best_policy(problem, policies, x, n_paths, config, seed, eps_reg)[0]
    note = MULTI_CONTROL_NOTE if len(problem.controls) > 1 else ""
    return replace(best, bias_bound=_bias_bound(problem, x, config), note=note)


def estimate_value_regularized(problem: ProblemSpec, eps: float, policies, x, n_paths: int,
                               config: SimConfig, seed: int = 0) -> Estimate:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return estimate_value(problem, policies, x, n_paths, config, seed, eps_reg=eps)


def fd_directional(problem: ProblemSpec, policies, x, xi, eps_list, n_paths: int, config: SimConfig,
                   order: str = "first", seed: int = 0, common: bool = True) -> list:
    """Difference quotients of v along xi with common random numbers.

    first:  (v(x + eps xi) - v(x)) / eps
    second: (v(x + eps xi) - 2 v(x) + v(x - eps xi)) / eps^2

    The policy is the best one at x and is reused at the shifted starts.
    With common=False each start gets its own seed (for comparison only).
    """
    if order not in ("first", "second"):
        raise ValueError("order must be 'first' or 'second'")
    x = _check_start(problem, x, config.level)
    xi = np.asarray(xi, dtype=float)
    for e in eps_list:
        _check_start(problem, x + e * xi, config.level)
        if order == "second":
            _check_start(problem, x - e * xi, config.level)
    _, p0, pol = _best_policy(problem, policies, x, n_paths, config, seed, 0.0)
    out = []
    for j, e in enumerate(eps_list):
        s1 = seed if common else rng.derive_seed(seed, f"fd+{j}")
        s2 = seed if common else rng.derive_seed(seed, f"fd-{j}")
        pp = _policy_payoffs(problem, pol, x + e * xi, n_paths, config, s1)
        if order == "first":
            out.append(Estimate.of((pp - p0) / e))
        else:
            pm = _policy_payoffs(problem, pol, x - e * xi, n_paths, config, s2)
            out.append(Estimate.of((pp - 2 * p0 + pm) / (e * e)))
    return out


# --------------------------------------------------------------------------
# representation and coupling experiments


def representation_first(problem: ProblemSpec, x, xi, eps: float, stop: StopSpec, n_paths: int,
                         params: BarrierParams, v_oracle: Optional[Callable], seed: int = 0,
                         dt: float = 1e-3, aux_off: bool = False) -> dict:
    """Compare v(x + eps xi) with E[v(y) p e^(-phi) + q] at the joint stop."""
    if v_oracle is None:
        raise NotImplementedError("representation_first needs an exact value oracle")
    if len(problem.controls) != 1:
        raise ValueError("the identity is checked for single-control problems")
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if not problem.domain.psi(x + eps * xi) > stop.delta:
        raise ValueError("x + eps xi is not in D_delta")
    res = run_coupled(problem, params, x, xi, n_paths, seed, dt, stop, eps=eps, aux_off=aux_off)
    y = res.y
    V = v_oracle(y.y) * np.exp(y.logp - y.phi_eps) + y.q
    rhs = Estimate.of(V)
    lhs = float(v_oracle((x + eps * xi)[None, :])[0])
    return {"lhs": lhs, "rhs": rhs, "gap": abs(lhs - rhs.mean), "tol": 3 * rhs.stderr + 0.01}


def coupling_first(problem: ProblemSpec, x, xi, eps_list, T: float, n_paths: int, params: BarrierParams,
                   seed: int = 0, dt: float = 1e-3, delta: float = 1.0, aux_off: bool = False) -> list:
    """Mean of sup_t |(y_t(eps) - x_t)/eps - xi_t| up to the base process stop."""
    stop = StopSpec(T=T, delta=delta, base_only=True)
    out = []
    for e in eps_list:
        res = run_coupled(problem, params, x, xi, n_paths, seed, dt, stop, eps=e, aux_off=aux_off)
        out.append(Estimate.of(res.sup_err1))
    return out


def coupling_second(problem: ProblemSpec, x, xi, eta0, eps_list, T: float, n_paths: int,
                    params: BarrierParams, seed: int = 0, dt: float = 1e-3, delta: float = 1.0,
                    aux_off: bool = False) -> list:
    """Mean of sup_t |(z_t(eps) - 2 x_t + z_t(-eps))/eps^2 - eta_t|."""
    stop = StopSpec(T=T, delta=delta, base_only=True)
    out = []
    for e in eps_list:
        res = run_coupled(problem, params, x, xi, n_paths, seed, dt, stop, eps=e, eta0=eta0,
                          second=True, aux_off=aux_off)
        out.append(Estimate.of(res.sup_err2))
    return out


def exit_moments(problem: ProblemSpec, x, n_list, n_paths: int, config: SimConfig, seed: int = 0,
                 policy: Optional[PolicySpec] = None) -> list:
    """Moments E tau^n with the bounds n! |psi|^(n-1) psi(x).

    psi is used as given when L psi <= -1 already holds; otherwise it is
    scaled up by 1/min(-L psi).
    """
    x = _check_start(problem, x, config.level)
    scale = max(1.0, 1.0 / psi_normalizer(problem))
    sp = _sup_psi(problem) * scale
    px = float(problem.domain.psi(x)) * scale
    cfg = replace(config, policy=policy or PolicySpec.constant(0))
    tau = simulate_batch(problem, cfg, x, n_paths, seed).exit_time
    out = []
    for n in n_list:
        bound = math.factorial(n) * sp ** (n - 1) * px
        out.append(MomentResult(int(n), Estimate.of(tau ** n), bound))
    return out


# --------------------------------------------------------------------------
# bounds and diagnostics


def theorem_bound_check(problem: ProblemSpec, probes, estimates: Sequence[Estimate], n_sup: int = 4096) -> list:
    """|v(x)| <= |g|_0 + psi(x) sup|f| + 3 stderr at every probe.

    psi is used as given when L psi <= -1 holds, otherwise scaled up.
    """
    m = 1.0 / max(1.0, 1.0 / psi_normalizer(problem))
    bd = problem.domain
    # |g| on the boundary: sample points of the level set by radial projection
    pts = problem.sample_interior(n_sup, 3)
    fsup = max(c.f.sup_abs(pts) for c in problem.controls)
    from .quasi_engine import sample_level_points
    bpts = np.array(sample_level_points(bd, np.zeros(256), 5), dtype=float)
    gsup = problem.g.sup_abs(bpts)
    rows = []
    for x, est in zip(np.asarray(probes, dtype=float), estimates):
        bound = gsup + float(bd.psi(x)) / m * fsup
        rows.append({"x": x.tolist(), "mean": est.mean, "stderr": est.stderr, "bound": bound,
                     "pass": abs(est.mean) <= bound + 3 * est.stderr})
    return rows


def normal_derivative_probe(problem: ProblemSpec, ys, eps: float, n_paths: int, config: SimConfig,
                            policies, seed: int = 0) -> list:
    """K = |(v(y + eps n) - g(y)) / eps| / (|g|_2 + sup|f|) at boundary points y."""
    pts = problem.sample_interior(1024, 4)
    fsup = max(c.f.sup_abs(pts) for c in problem.controls)
    g2 = problem.g.sup_abs(pts) + float(np.max(np.linalg.norm(problem.g.grad(pts), axis=1))) \
        + float(np.linalg.norm(problem.g.hess(pts[:1])[0], 2))
    out = []
    for y in np.asarray(ys, dtype=float):
        gr = problem.domain.grad(y[None, :])[0]
        nvec = gr / np.linalg.norm(gr)
        est = estimate_value(problem, policies, y + eps * nvec, n_paths, config, seed)
        gy = float(problem.g.value(y[None, :])[0])
        out.append(abs(est.mean - gy) / eps / (g2 + fsup))
    return out


def regularization_diagnostic(problem: ProblemSpec, eps: float, x, n_paths: int, config: SimConfig,
                              seed: int = 0) -> dict:
    """MC estimates of E sup|x(eps) - x| and E|tau(eps) - tau| on shared noise
    (constant policy from config), plus the crude bound they imply."""
    x = _check_start(problem, x, config.level)
    ci = config.policy.index
    c = problem.controls[ci]
    dom = problem.domain
    dt = config.dt
    sq = math.sqrt(dt)
    X = np.tile(x, (n_paths, 1))
    Y = X.copy()
    ids = np.arange(n_paths, dtype=np.int64)
    tx = np.full(n_paths, np.nan)
    ty = np.full(n_paths, np.nan)
    sup = np.zeros(n_paths)
    nmax = int(math.ceil(config.t_max / dt))
    for k in range(nmax):
        ax = np.isnan(tx)
        ay = np.isnan(ty)
        if not (ax.any() or ay.any()):
            break
        dw = sq * rng.normals(seed, rng.BASE, ids, k, problem.d1)
        da = eps * sq * rng.normals(seed, rng.AUX, ids, k, problem.d)
        X[ax] += dw[ax] @ c.sigma.T + c.b * dt
        Y[ay] += dw[ay] @ c.sigma.T + c.b * dt + da[ay]
        both = ax & ay
        sup[both] = np.maximum(sup[both], np.linalg.norm(X[both] - Y[both], axis=1))
        tx[ax & (dom.psi(X) <= 0)] = (k + 1) * dt
        ty[ay & (dom.psi(Y) <= 0)] = (k + 1) * dt
    tx = np.where(np.isnan(tx), config.t_max, tx)
    ty = np.where(np.isnan(ty), config.t_max, ty)
    ex = Estimate.of(sup)
    et = Estimate.of(np.abs(ty - tx))
    pts = problem.sample_interior(1024, 4)
    L = float(np.max(np.linalg.norm(problem.g.grad(pts), axis=1)))
    fsup = c.f.sup_abs(pts)
    gscale = problem.g.sup_abs(pts)
    return {"sup_dx": ex, "dtau": et, "bound": L * ex.mean + (fsup + L * gscale) * et.mean}


# --------------------------------------------------------------------------
# results table


@dataclass
class ResultRow:
    experiment: str
    x: Sequence[float]
    xi: Sequence[float]
    eps: float
    est: Estimate
    seed: int


def write_results_csv(path, rows: Sequence[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "x", "xi", "eps", "mean", "stderr", "bias_bound", "n_paths", "seed"])
        for r in rows:
            w.writerow([r.experiment, " ".join(repr(float(v)) for v in r.x),
                        " ".join(repr(float(v)) for v in r.xi), repr(float(r.eps)),
                        repr(r.est.mean), repr(r.est.stderr), repr(r.est.bias_bound), r.est.n_paths, r.seed])
