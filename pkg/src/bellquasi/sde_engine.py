"""Euler simulation of the controlled diffusion, its regularised version and
the perturbed processes y(eps), z(eps) used for the derivative
representations. Exit detection, discount and payoff accumulation."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import rng
from .problem_core import ControlPoint, DomainFn, ProblemSpec

CHUNK = 1 << 17


# --------------------------------------------------------------------------
# policies and config


@dataclass(frozen=True)
class PolicySpec:
    """CONSTANT(index) or FEEDBACK(table on a regular grid)."""

    kind: str = "constant"
    index: int = 0
    table: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    h: float = 0.0

    @staticmethod
    def constant(index: int) -> "PolicySpec":
        return PolicySpec("constant", int(index))

    @staticmethod
    def feedback(table, lo, h) -> "PolicySpec":
        return PolicySpec("feedback", -1, np.asarray(table, dtype=np.int64), np.asarray(lo, dtype=float), float(h))

    def lookup(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(x.shape[0], self.index, dtype=np.int64)
        ij = np.rint((x - self.lo) / self.h).astype(np.int64)
        for k in range(ij.shape[1]):
            np.clip(ij[:, k], 0, self.table.shape[k] - 1, out=ij[:, k])
        return self.table[tuple(ij.T)]

    def label(self) -> str:
        return f"const[{self.index}]" if self.kind == "constant" else "feedback"


@dataclass
class SimConfig:
    dt: float = 1e-3
    t_max: float = 10.0
    boundary_bisection_iters: int = 50
    policy: PolicySpec = field(default_factory=PolicySpec)
    bridge: bool = True  # Brownian-bridge crossing test inside a step
    level: float = 0.0  # stop when psi <= level
    threads: int = 1

    def __post_init__(self):
        if not (0 < self.dt <= self.t_max):
            raise ValueError("need 0 < dt <= t_max")
        if self.boundary_bisection_iters < 0:
            raise ValueError("boundary_bisection_iters must be >= 0")


@dataclass
class PathRecord:
    exit_time: float
    exit_point: np.ndarray
    discount: float
    payoff: float
    truncated: bool
    trace: Optional[list] = None


@dataclass
class BatchResult:
    exit_time: np.ndarray
    exit_point: np.ndarray
    discount: np.ndarray
    payoff: np.ndarray
    truncated: np.ndarray

    def record(self, i: int, trace=None) -> PathRecord:
        return PathRecord(float(self.exit_time[i]), self.exit_point[i].copy(), float(self.discount[i]),
                          float(self.payoff[i]), bool(self.truncated[i]), trace)


# --------------------------------------------------------------------------
# single steps


def step_base(x, control: ControlPoint, dw, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    dw = np.asarray(dw, dtype=float)
    if x.shape[-1] != control.sigma.shape[0] or dw.shape[-1] != control.sigma.shape[1]:
        raise ValueError("dimension mismatch")
    return x + dw @ control.sigma.T + control.b * dt


def time_change_factor(r, r_hat, eps: float, order: str = "first"):
    if order == "first":
        arg = 2.0 * np.pi * eps * np.asarray(r)
    elif order == "second":
        arg = np.pi * (2.0 * eps * np.asarray(r) + eps * eps * np.asarray(r_hat))
    else:
        raise ValueError("order must be 'first' or 'second'")
    return 1.0 + np.arctan(arg) / np.pi


def skew_expm(P, eps: float):
    """exp(eps P) for (batched) skew-symmetric P."""
    P = np.asarray(P, dtype=float)
    if np.max(np.abs(P + np.swapaxes(P, -1, -2)), initial=0.0) > 1e-12 * (1.0 + np.max(np.abs(P), initial=0.0)):
        raise ValueError("P is not skew-symmetric")
    d = P.shape[-1]
    if d == 1:
        return np.ones_like(P)
    if d == 2:
        w = eps * P[..., 1, 0]
        c, s = np.cos(w), np.sin(w)
        R = np.empty(P.shape)
        R[..., 0, 0] = c
        R[..., 0, 1] = -s
        R[..., 1, 0] = s
        R[..., 1, 1] = c
        return R
    return expm(eps * P)


@dataclass
class PerturbedState:
    """y(eps) (or z(eps)) with its Girsanov log-density, discount and q."""

    y: np.ndarray
    logp: np.ndarray
    phi_eps: np.ndarray
    q: np.ndarray

    @staticmethod
    def start(y0) -> "PerturbedState":
        y0 = np.array(y0, dtype=float)
        z = np.zeros(y0.shape[:-1])
        return PerturbedState(y0, z.copy(), z.copy(), z.copy())

    def copy(self) -> "PerturbedState":
        return PerturbedState(self.y.copy(), self.logp.copy(), self.phi_eps.copy(), self.q.copy())


def _perturbed_step(state: PerturbedState, control: ControlPoint, theta, R, shift, dw, dt):
    # y' = y + sqrt(theta) R sigma dw + (theta b - sqrt(theta) R sigma shift) dt
    st = np.sqrt(theta)[..., None]
    sdw = dw @ control.sigma.T
    ssh = shift @ control.sigma.T
    rot = (R @ (sdw - ssh * dt)[..., None])[..., 0]
    p = np.exp(state.logp)
    fy = control.f.value(state.y)
    q = state.q + theta * fy * p * np.exp(-state.phi_eps) * dt
    phi = state.phi_eps + theta * control.c * dt
    logp = state.logp + (shift * dw).sum(-1) - 0.5 * (shift * shift).sum(-1) * dt
    y = state.y + st * rot + theta[..., None] * control.b * dt
    return PerturbedState(y, logp, phi, q)


def step_perturbed_first(state: PerturbedState, aux, control: ControlPoint, eps: float, dw, dt: float):
    theta = time_change_factor(aux.r, aux.r_hat, eps, "first")
    R = skew_expm(aux.P, eps)
    return _perturbed_step(state, control, np.asarray(theta, dtype=float), R, eps * np.asarray(aux.pi), np.asarray(dw), dt)


def step_perturbed_second(state: PerturbedState, aux, control: ControlPoint, eps: float, dw, dt: float):
    """z(eps) step; pass a negative eps for z(-eps)."""
    theta = time_change_factor(aux.r, aux.r_hat, eps, "second")
    R = skew_expm(aux.P, eps)
    Ph = np.asarray(aux.P_hat)
    if np.any(Ph):
        R = np.einsum("...ij,...jk->...ik", R, skew_expm(Ph, 0.5 * eps * eps))
    shift = eps * np.asarray(aux.pi) + 0.5 * eps * eps * np.asarray(aux.pi_hat)
    return _perturbed_step(state, control, np.asarray(theta, dtype=float), R, shift, np.asarray(dw), dt)


# --------------------------------------------------------------------------
# exit detection


def _bisect(domain: DomainFn, xa, xb, level, iters):
    """Root of psi - level on segments with psi(xa) > level >= psi(xb).

    Illinois false position with a bisection fallback; returns (s, point)
    with point = xa + s (xb - xa) and psi(point) <= level + 1e-10.
    """
    seg = xb - xa
    lo = np.zeros(xa.shape[0])
    hi = np.ones(xa.shape[0])
    flo = domain.psi(xa) - level
    fhi = domain.psi(xb) - level
    side = np.zeros(xa.shape[0], dtype=np.int8)
    for _ in range(iters):
        done = np.abs(fhi) <= 1e-10
        if np.all(done):
            break
        den = flo - fhi
        s = np.where(den > 0, lo + flo / np.where(den > 0, den, 1.0) * (hi - lo), 0.5 * (lo + hi))
        bad = ~((s > lo) & (s < hi))
        s = np.where(bad, 0.5 * (lo + hi), s)
        fm = domain.psi(xa + s[:, None] * seg) - level
        inside = (fm > 0) & ~done
        outside = (fm <= 0) & ~done
        lo = np.where(inside, s, lo)
        flo = np.where(inside, fm, flo)
        hi = np.where(outside, s, hi)
        fhi = np.where(outside, fm, fhi)
        # Illinois: halve the stale end point's value
        fhi = np.where(inside & (side == 1), 0.5 * fhi, fhi)
        flo = np.where(outside & (side == -1), 0.5 * flo, flo)
        side = np.where(inside, 1, np.where(outside, -1, side)).astype(np.int8)
    return hi, xa + hi[:, None] * seg


def detect_exit(domain: DomainFn, x_prev, x_next, level: float = 0.0, iters: int = 60):
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if domain.psi(x_prev) <= level:
        raise ValueError("x_prev is already outside the stopping set")
    if domain.psi(x_next) > level:
        return None
    _, pt = _bisect(domain, x_prev[None], x_next[None], level, iters)
    return pt[0]


def _project_to_level(domain: DomainFn, x, level, iters=3):
    for _ in range(iters):
        g = domain.grad(x)
        x = x - ((domain.psi(x) - level) / (g * g).sum(-1))[:, None] * g
    return x


# --------------------------------------------------------------------------
# batch simulation


def _simulate_chunk(problem: ProblemSpec, config: SimConfig, x0, ids, seed, eps_reg, trace):
    dom = problem.domain
    sig, bvec, cvec = problem.stacked()
    d, d1 = problem.d, problem.d1
    dt = config.dt
    sq = math.sqrt(dt)
    level = config.level
    n = ids.shape[0]
    X = np.array(np.broadcast_to(x0, (n, d)), dtype=float)
    if np.any(dom.psi(X) <= level):
        raise ValueError("start point outside D")
    out_T = np.zeros(n)
    out_X = X.copy()
    out_phi = np.zeros(n)
    out_pay = np.zeros(n)
    trunc = np.zeros(n, dtype=bool)
    # compacted state of live paths
    pos = np.arange(n)
    pid = ids.copy()
    T = np.zeros(n)
    phi = np.zeros(n)
    pay = np.zeros(n)
    fields = [c.f for c in problem.controls]
    const_pol = config.policy.kind == "constant"
    rows = [] if trace else None
    nmax = int(math.ceil(config.t_max / dt - 1e-9))
    k = 0
    while pos.size and k < nmax:
        ci = config.policy.lookup(X)
        dw = sq * rng.normals(seed, rng.BASE, pid, k, d1)
        if const_pol:
            s0 = sig[config.policy.index]
            Xn = X + dw @ s0.T + bvec[config.policy.index] * dt
        else:
            Xn = X + np.einsum("nij,nj->ni", sig[ci], dw) + bvec[ci] * dt
        if eps_reg > 0:
            Xn += eps_reg * sq * rng.normals(seed, rng.AUX, pid, k, d)
        p0 = dom.psi(X) - level
        p1 = dom.psi(Xn) - level
        frac = np.ones(pos.size)
        hit = p1 <= 0
        if hit.any():
            s, pt = _bisect(dom, X[hit], Xn[hit], level, config.boundary_bisection_iters)
            frac[hit] = s
            Xn[hit] = pt
        if config.bridge:
            g = dom.grad(X)
            if const_pol:
                s2 = ((g @ sig[config.policy.index]) ** 2).sum(1)
            else:
                s2 = (np.einsum("nij,ni->nj", sig[ci], g) ** 2).sum(1)
            if eps_reg > 0:
                s2 = s2 + eps_reg * eps_reg * (g * g).sum(1)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                pc = np.exp(-2.0 * p0 * np.maximum(p1, 0.0) / (s2 * dt))
            pc[~(s2 > 0)] = 0.0
            u = rng.uniforms(seed, rng.UNIFORM, pid, k)
            bh = (~hit) & (u < pc)
            if bh.any():
                frac[bh] = 0.5
                Xn[bh] = _project_to_level(dom, 0.5 * (X[bh] + Xn[bh]), level)
                hit |= bh
        # left-endpoint payoff with the current discount
        if len(fields) == 1:
            fx = fields[0].value(X)
        else:
            fx = np.empty(pos.size)
            for m in np.unique(ci):
                sel = ci == m
                fx[sel] = fields[m].value(X[sel])
        h = frac * dt
        pay += fx * np.exp(-phi) * h
        phi += cvec[ci] * h
        T += h
        X = Xn
        if trace:
            rows.append((float(T[0]), X[0].copy(), float(dom.psi(X[0])), float(phi[0]), 0.0))
        if hit.any():
            w = pos[hit]
            out_T[w], out_X[w], out_phi[w], out_pay[w] = T[hit], X[hit], phi[hit], pay[hit]
            keep = ~hit
            pos, pid, X, T, phi, pay = pos[keep], pid[keep], X[keep], T[keep], phi[keep], pay[keep]
        k += 1
    if pos.size:
        trunc[pos] = True
        out_T[pos], out_X[pos], out_phi[pos], out_pay[pos] = T, X, phi, pay
    done = ~trunc
    out_pay[done] += problem.g.value(out_X[done]) * np.exp(-out_phi[done])
    return BatchResult(out_T, out_X, out_phi, out_pay, trunc), rows


def simulate_batch(problem: ProblemSpec, config: SimConfig, x0, n_paths: int, seed: int,
                   eps_reg: float = 0.0, first_index: int = 0) -> BatchResult:
    """Simulate paths first_index .. first_index + n_paths - 1.

    Paths are processed in fixed blocks; each path draws its own noise, so the
    result does not depend on config.threads.
    """
    x0 = np.asarray(x0, dtype=float)
    ids = np.arange(first_index, first_index + n_paths, dtype=np.int64)
    blocks = [ids[i:i + CHUNK] for i in range(0, n_paths, CHUNK)]

    def run(b):
        return _simulate_chunk(problem, config, x0, b, seed, eps_reg, False)[0]

    if config.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            parts = list(ex.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return BatchResult(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("exit_time", "exit_point", "discount", "payoff", "truncated")))


def simulate_path(problem: ProblemSpec, config: SimConfig, x0, noise: rng.NoiseStream,
                  trace: bool = False, eps_reg: float = 0.0) -> PathRecord:
    x0 = np.asarray(x0, dtype=float)
    if problem.domain.psi(x0) <= config.level:
        raise ValueError("x0 outside D")
    res, rows = _simulate_chunk(problem, config, x0, np.array([noise.path_index]), noise.seed, eps_reg, trace)
    if trace:
        rows.insert(0, (0.0, x0.copy(), float(problem.domain.psi(x0)), 0.0, 0.0))
    return res.record(0, rows)


def simulate_regularized(problem: ProblemSpec, eps: float, config: SimConfig, x0,
                         noise: rng.NoiseStream, trace: bool = False) -> PathRecord:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return simulate_path(problem, config, x0, noise, trace, eps_reg=eps)


def write_trace_csv(path, record: PathRecord, d: int) -> None:
    cols = ["t"] + [f"x{i + 1}" for i in range(d)] + ["psi", "phi", "logp"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t, x, p, ph, lp in record.trace or []:
            vals = [t, *x.tolist(), p, ph, lp]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
