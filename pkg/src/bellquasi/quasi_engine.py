"""Quasiderivative processes: auxiliary processes r, r_hat, pi, pi_hat, P,
P_hat for the boundary and interior constructions, their hysteresis
gluing, the quasiderivative SDE steps, the barrier functions and the
certificates (generator drift, switching, the algebraic identity for P).

Barrier evaluations are written with elementwise arithmetic only, so they
also run on object arrays of mpmath numbers. That is needed for the
certificates: the calibrated lambda puts the strip {psi <= lambda^2} below
double-precision resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import mpmath
import numpy as np

from . import rng
from .problem_core import ControlPoint, DomainFn, ProblemSpec
from .sde_engine import PerturbedState, step_perturbed_first, step_perturbed_second, _bisect

BOUNDARY = "BOUNDARY"
INTERIOR = "INTERIOR"

MP_DPS = 60


def nu_of(theta: float) -> float:
    return theta * (1 - 2 * theta) ** 2 / (2 * (1 - 3 * theta))


@dataclass(frozen=True)
class BarrierParams:
    lam: float
    delta: float
    theta: float
    k1: float
    kappa_power: float = 1.0

    def __post_init__(self):
        if not (0 < self.delta < self.lam ** 2 < self.lam < 1):
            raise ValueError("need 0 < delta < lambda^2 < lambda < 1")
        if not (0 < self.theta < 1.0 / 3.0):
            raise ValueError("theta must lie in (0, 1/3)")
        if self.k1 < 1:
            raise ValueError("K1 must be >= 1")

    @property
    def nu(self) -> float:
        return nu_of(self.theta)

    @staticmethod
    def make(lam: float, theta: float, k1: float, kappa: float = 1.0) -> "BarrierParams":
        return BarrierParams(lam, 0.25 * lam * lam, theta, k1, kappa)


@dataclass
class AuxProcesses:
    r: np.ndarray
    r_hat: np.ndarray
    pi: np.ndarray
    pi_hat: np.ndarray
    P: np.ndarray
    P_hat: np.ndarray
    regime: object


@dataclass
class QuasiState:
    xi: np.ndarray
    eta: np.ndarray
    xi_tilde: np.ndarray
    eta_tilde: np.ndarray
    xi_d1: np.ndarray
    xi_d2: np.ndarray
    xi_d3: np.ndarray
    eta_d1: np.ndarray
    eta_d2: np.ndarray
    eta_d3: np.ndarray

    @staticmethod
    def start(xi0, eta0=None) -> "QuasiState":
        xi0 = np.array(xi0, dtype=float)
        eta0 = np.zeros_like(xi0) if eta0 is None else np.array(np.broadcast_to(eta0, xi0.shape), dtype=float)
        z = np.zeros(xi0.shape[:-1])
        return QuasiState(xi0, eta0, *(z.copy() for _ in range(8)))

    def take(self, sel) -> "QuasiState":
        return QuasiState(*(getattr(self, f)[sel] for f in _QFIELDS))


_QFIELDS = ("xi", "eta", "xi_tilde", "eta_tilde", "xi_d1", "xi_d2", "xi_d3", "eta_d1", "eta_d2", "eta_d3")


# --------------------------------------------------------------------------
# small generic helpers (work on float and object arrays)


def _dot(a, b):
    return (a * b).sum(-1)


def _matvec(M, v):
    return (M * v[..., None, :]).sum(-1)


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _cols(sigma):
    # sigma columns sigma_k as an array (d1, d)
    return np.asarray(sigma).T


def _proj(vec, sigma):
    # (vec, sigma_k) for every column, shape (..., d1)
    if vec.dtype != object:
        return vec @ np.asarray(sigma, dtype=float)
    return (vec[..., None, :] * _cols(sigma)).sum(-1)


# --------------------------------------------------------------------------
# auxiliary processes


def aux_boundary(domain: DomainFn, x, xi, xi_tilde, params: BarrierParams, sigma) -> AuxProcesses:
    x = np.asarray(x)
    xi = np.asarray(xi)
    p = domain.psi(x)
    g = domain.grad(x)
    H = domain.hess(x)
    n2 = _dot(g, g)
    if np.any(np.asarray(n2 == 0)):
        raise ZeroDivisionError("grad psi vanishes: rho and P are undefined")
    if np.any(np.asarray(p <= 0)):
        raise ValueError("boundary construction needs psi > 0")
    lam = params.lam
    gx = _dot(g, xi)
    Hxi = _matvec(H, xi)
    rho = -_dot(g, Hxi) / n2
    r = rho + gx / p
    r_hat = gx * gx / (p * p)
    beta = 1 + p * (1 - p / (4 * lam)) / (8 * lam)
    gam = lam * lam + p * (1 - p / (4 * lam))
    coef = (1 - p / (2 * lam)) / (2 * gam)
    pi = coef[..., None] * ((gx / p)[..., None] * _proj(g, sigma) + beta[..., None] * _proj(xi, sigma)) \
        if np.ndim(p) else coef * ((gx / p) * _proj(g, sigma) + beta * _proj(xi, sigma))
    P = (_outer(Hxi, g) - _outer(g, Hxi)) / (n2[..., None, None] if np.ndim(n2) else n2)
    xt = np.asarray(xi_tilde)
    pi_hat = -2 * (xt[..., None] if np.ndim(xt) else xt) * pi
    return AuxProcesses(r, r_hat, pi, pi_hat, P, np.zeros(P.shape), BOUNDARY)


def aux_interior(domain: DomainFn, x, xi, xi_tilde, params: BarrierParams, sigma) -> AuxProcesses:
    x = np.asarray(x)
    xi = np.asarray(xi)
    p = domain.psi(x)
    if np.any(np.asarray(p <= 0)):
        raise ValueError("interior construction needs psi > 0")
    g = domain.grad(x)
    gx = _dot(g, xi)
    th = params.theta
    nu = params.nu
    r = th * gx / p
    r_hat = 0 * r
    if np.ndim(p):
        pi = (nu / (p * p))[..., None] * (params.k1 * p[..., None] * _proj(xi, sigma) + gx[..., None] * _proj(g, sigma))
    else:
        pi = (nu / (p * p)) * (params.k1 * p * _proj(xi, sigma) + gx * _proj(g, sigma))
    xt = np.asarray(xi_tilde)
    pi_hat = -2 * (xt[..., None] if np.ndim(xt) else xt) * pi
    d = x.shape[-1]
    P = np.zeros(x.shape[:-1] + (d, d))
    return AuxProcesses(r, r_hat, pi, pi_hat, P, P.copy(), INTERIOR)


def aux_glued(domain: DomainFn, x, xi, xi_tilde, params: BarrierParams, sigma, boundary_mask) -> AuxProcesses:
    """Per-path choice of construction; boundary_mask True selects BOUNDARY."""
    a = aux_interior(domain, x, xi, xi_tilde, params, sigma)
    if not np.any(boundary_mask):
        a.regime = np.zeros(x.shape[0], dtype=bool)
        return a
    sel = np.asarray(boundary_mask)
    b = aux_boundary(domain, x[sel], xi[sel], np.asarray(xi_tilde)[sel], params, sigma)
    for f in ("r", "r_hat", "pi", "pi_hat", "P"):
        getattr(a, f)[sel] = getattr(b, f)
    a.regime = sel.copy()
    return a


def pproperty_residual(domain: DomainFn, x, xi, sigma) -> np.ndarray:
    """|psi_(xi)(sigma_k) + rho psi_(sigma_k) + psi_(P sigma_k)|, max over k."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    g = domain.grad(x)
    H = domain.hess(x)
    n2 = _dot(g, g)
    Hxi = _matvec(H, xi)
    rho = -_dot(g, Hxi) / n2
    P = (_outer(Hxi, g) - _outer(g, Hxi)) / n2[:, None, None]
    S = np.asarray(sigma, dtype=float)
    t1 = Hxi @ S  # psi_(xi)(sigma_k) = sigma_k . H xi
    t2 = rho[:, None] * (g @ S)
    t3 = np.einsum("ni,nij,jk->nk", g, P, S)
    return np.max(np.abs(t1 + t2 + t3), axis=1)


# --------------------------------------------------------------------------
# quasiderivative step


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def step_quasi(state: QuasiState, aux: AuxProcesses, control: ControlPoint, x, phi, dw, dt: float) -> QuasiState:
    """One Euler step of (xi, eta, xi~, eta~) and the extended components."""
    sig = control.sigma
    b = control.b
    c = control.c
    f = control.f
    xi, eta = state.xi, state.eta
    r = np.asarray(aux.r, dtype=float)
    rh = np.asarray(aux.r_hat, dtype=float)
    pi = np.asarray(aux.pi, dtype=float)
    pih = np.asarray(aux.pi_hat, dtype=float)
    P = np.asarray(aux.P, dtype=float)
    Ph = np.asarray(aux.P_hat, dtype=float)
    dw = np.asarray(dw, dtype=float)
    sdw = dw @ sig.T
    Psdw = _mv(P, sdw)
    rc = r[..., None]
    # d xi = (r sigma + P sigma) dw + (2 r b - sigma pi) dt
    spi = pi @ sig.T
    xi_n = xi + rc * sdw + Psdw + (2 * rc * b - spi) * dt
    # d eta = [(r^ - r^2) sigma + (P^ + 2 r P + P^2) sigma] dw
    #         + [2 r^ b - sigma pi^ - 2 (r sigma + P sigma) pi] dt
    M = Ph + 2 * rc[..., None] * P + P @ P
    eta_n = eta + (rh - r * r)[..., None] * sdw + _mv(M, sdw) \
        + (2 * rh[..., None] * b - pih @ sig.T - 2 * (rc * spi + _mv(P, spi))) * dt
    xt_n = state.xi_tilde + (pi * dw).sum(-1)
    et_n = state.eta_tilde + ((pih + 2 * state.xi_tilde[..., None] * pi) * dw).sum(-1) \
        if np.ndim(state.xi_tilde) else state.eta_tilde + ((pih + 2 * state.xi_tilde * pi) * dw).sum(-1)
    fv = f.value(x)
    fg = f.grad(x)
    fH = f.hess(x)
    f_xi = (fg * xi).sum(-1)
    f_eta = (fg * eta).sum(-1)
    f_xixi = (_mv(fH, xi) * xi).sum(-1) if np.ndim(fH) > 2 else ((xi @ fH) * xi).sum(-1)
    e = np.exp(-np.asarray(phi, dtype=float))
    x1, x2, y1, y2 = state.xi_d1, state.xi_d2, state.eta_d1, state.eta_d2
    xd3 = state.xi_d3 + e * (f_xi + (2 * r - x1 + x2) * fv) * dt
    bracket = (f_xixi + f_eta + 2 * (2 * r - x1 + x2) * f_xi
               + (2 * rh - 4 * r * (x1 - x2) + x1 * x1 - y1 - 2 * x1 * x2 + y2) * fv)
    ed3 = state.eta_d3 + e * bracket * dt
    xd1 = x1 + 2 * r * c * dt
    ed1 = y1 + 2 * rh * c * dt
    return QuasiState(xi_n, eta_n, xt_n, et_n, xd1, xt_n.copy(), xd3, ed1, et_n.copy(), ed3)


# --------------------------------------------------------------------------
# regime automaton


@dataclass
class SwitchAutomaton:
    regime: str = INTERIOR
    switch_times: list = field(default_factory=list)


def update_regime(automaton: SwitchAutomaton, psi: float, params: BarrierParams, t: float) -> SwitchAutomaton:
    new = automaton.regime
    if automaton.regime == INTERIOR and psi <= params.lam ** 2:
        new = BOUNDARY
    elif automaton.regime == BOUNDARY and psi >= params.lam:
        new = INTERIOR
    if new == automaton.regime:
        return automaton
    return SwitchAutomaton(new, automaton.switch_times + [t])


def update_regime_mask(boundary_mask, psi, params: BarrierParams):
    """Vectorised hysteresis: True = BOUNDARY."""
    return np.where(boundary_mask, ~(psi >= params.lam), psi <= params.lam ** 2)


# --------------------------------------------------------------------------
# barriers


def barrier_B1(domain: DomainFn, x, xi, params: BarrierParams):
    p = domain.psi(x)
    gx = _dot(domain.grad(x), xi)
    lam = params.lam
    beta = 1 + p * (1 - p / (4 * lam)) / (8 * lam)
    gam = lam * lam + p * (1 - p / (4 * lam))
    return gam * (beta * _dot(xi, xi) + gx * gx / p)


def barrier_B2(domain: DomainFn, x, xi, params: BarrierParams):
    p = domain.psi(x)
    gx = _dot(domain.grad(x), xi)
    th = params.theta
    if isinstance(p, mpmath.mpf) or (isinstance(p, np.ndarray) and p.dtype == object):
        lam = mpmath.mpf(params.lam)
        th = mpmath.mpf(th)
        powp = np.vectorize(lambda q: q ** (1 - 2 * th), otypes=[object])(p) if isinstance(p, np.ndarray) \
            else p ** (1 - 2 * th)
        return lam ** (3 * th) * powp * (params.k1 * _dot(xi, xi) + gx * gx / p)
    return params.lam ** (3 * th) * p ** (1 - 2 * th) * (params.k1 * _dot(xi, xi) + gx * gx / p)


def barrier_envelopes(domain: DomainFn, x, xi, params: BarrierParams):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    p = domain.psi(x)
    lam, dl = params.lam, params.delta
    if np.any(p <= dl):
        raise ValueError("point outside D_delta")
    in1 = (p > dl) & (p < lam)
    in2 = p >= lam * lam
    with np.errstate(invalid="ignore", divide="ignore"):
        b1 = barrier_B1(domain, x, xi, params)
        b2 = barrier_B2(domain, x, xi, params)
    upper = np.where(in1, b1, 0.0) + np.where(in2, b2, 0.0)
    lower = np.where(p < lam * lam, b1, np.where(p > lam, b2, np.minimum(b1, b2)))
    if np.ndim(upper) == 0:
        return float(upper), float(lower)
    return upper, lower


# --------------------------------------------------------------------------
# generator drift certificate


def _to_mp(v):
    v = np.asarray(v)
    if v.dtype == object:
        return v
    return np.array([mpmath.mpf(float(t)) for t in v.ravel()], dtype=object).reshape(v.shape)


def _norm_mp(v):
    return mpmath.sqrt(sum(t * t for t in v))


def generator_drift(problem: ProblemSpec, control: ControlPoint, domain: DomainFn, x, xi, xi_tilde,
                    regime: str, params: BarrierParams, barrier: str, kappa: float = 1.0,
                    rel_step: float = 1e-12) -> float:
    """Ito drift of B(x_t, xi_t)^kappa under the joint (x, xi) diffusion.

    Joint coefficients come from the x equation and the xi equation with the
    regime's auxiliary processes; derivatives of B are central differences
    along the drift vector and along each diffusion column, evaluated in
    MP_DPS-digit arithmetic. The step along a direction u is scaled so the
    x-part moves by at most rel_step * psi / |grad psi|.
    """
    if (regime == BOUNDARY) != (barrier == "B1"):
        raise ValueError("regime does not match barrier")
    with mpmath.workdps(MP_DPS):
        X = _to_mp(x)
        XI = _to_mp(xi)
        d = X.shape[0]
        sig = _to_mp(control.sigma)
        bvec = _to_mp(control.b)
        aux = (aux_boundary if regime == BOUNDARY else aux_interior)(domain, X, XI, mpmath.mpf(float(xi_tilde)), params, sig)
        r = aux.r
        pi = aux.pi
        P = aux.P
        S_x = sig
        S_xi = r * sig + np.array([[sum(P[i, j] * sig[j, k] for j in range(d)) for k in range(sig.shape[1])]
                                   for i in range(d)], dtype=object)
        mu_x = bvec
        mu_xi = 2 * r * bvec - np.array([sum(sig[i, k] * pi[k] for k in range(sig.shape[1])) for i in range(d)], dtype=object)
        fB = barrier_B1 if barrier == "B1" else barrier_B2
        kap = mpmath.mpf(kappa)

        def B(z):
            v = fB(domain, z[:d], z[d:], params)
            return v if kappa == 1 else v ** kap

        z0 = np.concatenate([X, XI])
        p0 = domain.psi(X)
        L = p0 / _norm_mp(domain.grad(X))
        size = 1 + _norm_mp(X) + _norm_mp(XI)
        B0 = B(z0)
        if not mpmath.isfinite(B0):
            raise FloatingPointError("barrier is not finite")

        def step_for(u):
            ux = _norm_mp(u[:d])
            h = size
            if ux > 0:
                h = min(h, L / ux)
            return rel_step * h

        total = mpmath.mpf(0)
        mu = np.concatenate([mu_x, mu_xi])
        nm = _norm_mp(mu)
        if nm > 0:
            u = mu / nm
            h = step_for(u)
            total += nm * (B(z0 + h * u) - B(z0 - h * u)) / (2 * h)
        for k in range(sig.shape[1]):
            col = np.concatenate([S_x[:, k], S_xi[:, k]])
            nc = _norm_mp(col)
            if nc == 0:
                continue
            u = col / nc
            h = step_for(u)
            total += nc * nc * (B(z0 + h * u) - 2 * B0 + B(z0 - h * u)) / (2 * h * h)
        if not mpmath.isfinite(total):
            raise FloatingPointError("non-finite derivative in drift evaluation")
        return float(total)


# --------------------------------------------------------------------------
# sampling on level sets (multiprecision)


def _anchor(domain: DomainFn) -> np.ndarray:
    lo, hi = domain.box_lo, domain.box_hi
    g = np.stack(np.meshgrid(*[np.linspace(a, b, 41) for a, b in zip(lo, hi)], indexing="ij"), -1).reshape(-1, lo.shape[0])
    return g[int(np.argmax(domain.psi(g)))]


def sample_level_points(domain: DomainFn, levels, seed: int, max_tries: Optional[int] = None):
    """Points with psi = level (one per entry) as mp object arrays.

    Root-finding along random rays from an interior anchor: vectorised
    bisection in double precision, then Newton steps in MP_DPS digits.
    Rays that miss (psi still above the level at the far end) are redrawn.
    """
    levels = [mpmath.mpf(v) for v in levels]
    n = len(levels)
    gen = np.random.default_rng(seed)
    anchor = _anchor(domain)
    d = anchor.shape[0]
    diam = domain.diameter()
    limit = 100 * max(n, 1) if max_tries is None else max_tries
    if n and float(domain.psi(anchor)) <= float(max(levels)):
        raise RuntimeError("anchor is below the requested level")
    U = np.empty((n, d))
    need = np.arange(n)
    tries = 0
    while need.size:
        tries += need.size
        if tries > limit + n:
            raise RuntimeError("level-set sampling failed")
        u = gen.normal(size=(need.size, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        lv = np.array([float(levels[i]) for i in need])
        miss = domain.psi(anchor + diam * u) > lv
        U[need[~miss]] = u[~miss]
        need = need[miss]
    lv = np.array([float(v) for v in levels])
    lo = np.zeros(n)
    hi = np.full(n, diam)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        above = domain.psi(anchor + mid[:, None] * U) > lv
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out = []
    with mpmath.workdps(MP_DPS):
        A = _to_mp(anchor)
        for i in range(n):
            Ui = _to_mp(U[i])
            t = mpmath.mpf(float(0.5 * (lo[i] + hi[i])))
            for _ in range(8):
                xp = A + t * Ui
                step = (domain.psi(xp) - levels[i]) / _dot(domain.grad(xp), Ui)
                t = t - step
                if abs(step) < mpmath.mpf(10) ** (-MP_DPS + 5) * (1 + abs(t)):
                    break
            out.append(A + t * Ui)
    return out


def _unit_xis(n: int, d: int, seed: int):
    gen = np.random.default_rng(seed)
    v = gen.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return [_to_mp(r) for r in v]


def _loguniform(a: float, b: float, n: int, seed: int):
    gen = np.random.default_rng(seed)
    with mpmath.workdps(MP_DPS):
        la, lb = mpmath.log(a), mpmath.log(b)
        return [mpmath.exp(la + (lb - la) * mpmath.mpf(float(u))) for u in gen.uniform(size=n)]


def _switch_margins(domain, pts_lam, pts_lam2, xis, params: BarrierParams):
    with mpmath.workdps(MP_DPS):
        m1 = min(barrier_B1(domain, x, e, params) - 4 * barrier_B2(domain, x, e, params) for x, e in zip(pts_lam, xis))
        m2 = min(barrier_B2(domain, x, e, params) - 4 * barrier_B1(domain, x, e, params) for x, e in zip(pts_lam2, xis))
    return float(m1), float(m2)


def switching_check(domain: DomainFn, params: BarrierParams, n_samples: int, seed: int = 0) -> dict:
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    pts1 = sample_level_points(domain, [params.lam] * n_samples, seed)
    pts2 = sample_level_points(domain, [params.lam ** 2] * n_samples, seed + 1)
    xis = _unit_xis(n_samples, domain.d, seed + 2)
    m1, m2 = _switch_margins(domain, pts1, pts2, xis, params)
    ratio = params.lam ** params.theta * 4 * params.k1 / (0.75 * 35 / 32)
    return {"min_b1_minus_4b2": m1, "min_b2_minus_4b1": m2, "governing_ratio": ratio,
            "pass": m1 >= 0 and m2 >= 0, "n_samples": n_samples}


def drift_samples(domain: DomainFn, lo: float, hi: float, n: int, seed: int):
    """(x, xi) pairs with log-uniform psi in [lo, hi] and unit xi."""
    levels = _loguniform(lo, hi, n, seed)
    pts = sample_level_points(domain, levels, seed + 11)
    xis = _unit_xis(n, domain.d, seed + 12)
    return list(zip(pts, xis))


def drift_certificate(problem: ProblemSpec, params: BarrierParams, samples, barrier: str,
                      kappa: float = 1.0, control_index: int = 0) -> float:
    ctl = problem.controls[control_index]
    regime = BOUNDARY if barrier == "B1" else INTERIOR
    worst = -math.inf
    for x, xi in samples:
        worst = max(worst, generator_drift(problem, ctl, problem.domain, x, xi, 0.0, regime, params, barrier, kappa))
    return worst


def psi_max(domain: DomainFn) -> float:
    return float(domain.psi(_anchor(domain)))


LAMBDA_GRID_SPEC = [2.0 ** -k for k in range(2, 11)]
LAMBDA_GRID = [2.0 ** -k for k in range(2, 41)]
THETAS = (1 / 4, 1 / 6, 1 / 12)
K1S = (1, 4, 16, 64)


class CalibrationError(RuntimeError):
    pass


def calibrate_lambda(problem: ProblemSpec, params_init: Optional[BarrierParams] = None, n_samples: int = 1000,
                     seed: int = 0, lambda_grid=None, thetas=THETAS, k1s=K1S, kappa: float = 1.0):
    """Largest lambda (with some theta, K1) passing switching and drift checks.

    Returns (BarrierParams, certificate dict).
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    from .problem_core import check_drift_condition
    if not check_drift_condition(problem, problem.sample_interior(256, seed))["pass"]:
        raise CalibrationError("drift condition on psi fails; normalize the problem first")
    grid = LAMBDA_GRID if lambda_grid is None else list(lambda_grid)
    if params_init is not None:
        thetas = (params_init.theta,) + tuple(t for t in thetas if t != params_init.theta)
    dom = problem.domain
    top = psi_max(dom)
    worst = None
    pilot = min(32, n_samples)
    tol = 1e-8 * dom.scale
    for lam in sorted(grid, reverse=True):
        strip_pilot = None
        for th in thetas:
            for k1 in sorted(k1s):
                pr = BarrierParams.make(lam, th, k1, kappa)
                # cheap screen with the closed forms of the level-set values
                ok1 = lam * (0.75 + lam) * 35 / 32 >= 4 * lam ** (1 + th) * k1 and 0.75 + lam >= 4 * lam ** th
                ok2 = lam ** (2 - th) * k1 >= 4 * lam ** 2 * (2 - lam / 4) * (1 + (lam - lam * lam / 4) / 8) \
                    and lam ** (-th) >= 4 * (2 - lam / 4)
                if not (ok1 and ok2):
                    worst = worst or {"lambda": lam, "theta": th, "k1": k1, "reason": "switching"}
                    continue
                # pilot drift samples reject hopeless candidates before the full runs
                if strip_pilot is None:
                    strip_pilot = drift_certificate(problem, pr, drift_samples(dom, pr.delta * 1.0001, lam * lam, pilot, seed + 5), "B1", kappa)
                di = drift_certificate(problem, pr, drift_samples(dom, lam, top * 0.999, pilot, seed + 6), "B2", kappa)
                if strip_pilot > tol or di > tol:
                    worst = {"lambda": lam, "theta": th, "k1": k1, "reason": "drift (pilot)",
                             "drift_max_strip": strip_pilot, "drift_max_interior": di}
                    continue
                sw = switching_check(dom, pr, n_samples, seed)
                m1, m2 = sw["min_b1_minus_4b2"], sw["min_b2_minus_4b1"]
                if not sw["pass"]:
                    worst = {"lambda": lam, "theta": th, "k1": k1, "reason": "switching", "margins": [m1, m2]}
                    continue
                ds = drift_certificate(problem, pr, drift_samples(dom, pr.delta * 1.0001, lam * lam, n_samples, seed + 3), "B1", kappa)
                di = drift_certificate(problem, pr, drift_samples(dom, lam, top * 0.999, n_samples, seed + 4), "B2", kappa)
                if ds <= tol and di <= tol:
                    cert = {"lambda": lam, "theta": th, "k1": k1, "nu": pr.nu,
                            "drift_max_strip": ds, "drift_max_interior": di,
                            "switching_margins": [m1, m2], "n_samples": n_samples, "seed": seed}
                    return pr, cert
                worst = {"lambda": lam, "theta": th, "k1": k1, "reason": "drift",
                         "drift_max_strip": ds, "drift_max_interior": di}
    raise CalibrationError(f"no candidate passes; last violator {worst}")


# --------------------------------------------------------------------------
# glued coupled simulation


@dataclass
class StopSpec:
    T: float = 1.0
    n_cap: float = 1e3
    delta: float = 0.1  # stop when psi of any tracked process <= delta
    region_exit: bool = False  # also stop when the start regime's region is left
    interp: bool = False  # place x, xi on the stop level by root finding
    base_only: bool = False  # only x decides the stop; y, z run along


@dataclass
class CoupledResult:
    t: np.ndarray
    x: np.ndarray
    phi: np.ndarray
    q: QuasiState
    boundary: np.ndarray
    n_switch: np.ndarray
    y: Optional[PerturbedState] = None
    zp: Optional[PerturbedState] = None
    zm: Optional[PerturbedState] = None
    sup_err1: Optional[np.ndarray] = None
    sup_err2: Optional[np.ndarray] = None
    max_eta_tilde: Optional[np.ndarray] = None
    sup_xi2: Optional[np.ndarray] = None


def run_coupled(problem: ProblemSpec, params: BarrierParams, x0, xi0, n_paths: int, seed: int, dt: float,
                stop: StopSpec, eps: Optional[float] = None, eta0=None, second: bool = False,
                control_index: int = 0, first_index: int = 0, aux_off: bool = False) -> CoupledResult:
    """Simulate x, the glued quasiderivatives and (optionally) y(eps), z(+-eps)
    on shared noise until the joint stopping time.

    With aux_off every auxiliary process is forced to zero.
    """
    ctl = problem.controls[control_index]
    dom = problem.domain
    d, d1 = problem.d, problem.d1
    sq = math.sqrt(dt)
    n = n_paths
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (n, d)))
    xi0 = np.array(np.broadcast_to(np.asarray(xi0, dtype=float), (n, d)))
    qs = QuasiState.start(xi0, None if eta0 is None else np.asarray(eta0, dtype=float))
    phi = np.zeros(n)
    t = np.zeros(n)
    psi0 = dom.psi(x)
    bmask = psi0 <= params.lam ** 2
    start_boundary = bmask.copy()
    nsw = bmask.astype(np.int64)
    ids = np.arange(first_index, first_index + n, dtype=np.int64)
    track_y = eps is not None and not second
    track_z = eps is not None and second
    y = PerturbedState.start(x + eps * xi0) if track_y else None
    if track_z:
        e0 = np.zeros(d) if eta0 is None else np.asarray(eta0, dtype=float)
        zp = PerturbedState.start(x + eps * xi0 + 0.5 * eps * eps * e0)
        zm = PerturbedState.start(x - eps * xi0 + 0.5 * eps * eps * e0)
    else:
        zp = zm = None
    err1 = np.zeros(n)
    err2 = np.zeros(n)
    maxet = np.zeros(n)
    supxi2 = (xi0 * xi0).sum(1)
    # results for stopped paths
    done_t = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    out_x = x.copy()
    out_phi = np.zeros(n)
    out_q = QuasiState.start(np.zeros((n, d)))
    out_b = np.zeros(n, dtype=bool)
    out_y = PerturbedState.start(x.copy()) if track_y else None
    out_zp = PerturbedState.start(x.copy()) if track_z else None
    out_zm = PerturbedState.start(x.copy()) if track_z else None
    pos = np.arange(n)
    pid = ids.copy()
    nmax = int(math.ceil(stop.T / dt - 1e-9))
    level = stop.delta
    if stop.region_exit:
        level_int = max(level, params.lam ** 2)

    def stopped_mask(xn, qn, yn, zpn, zmn, bm, sb):
        pv = dom.psi(xn)
        m = pv <= level
        if stop.region_exit:
            m |= np.where(sb, pv >= params.lam, pv <= level_int)
        m |= np.sqrt((qn.xi * qn.xi).sum(1)) >= stop.n_cap
        if stop.base_only:
            return m
        if yn is not None:
            m |= dom.psi(yn.y) <= level
        if zpn is not None:
            m |= (dom.psi(zpn.y) <= level) | (dom.psi(zmn.y) <= level)
        return m

    def store(sel, xs, qn, yn, zpn, zmn, bm, ts, ph):
        w = pos[sel]
        out_x[w] = xs[sel]
        out_phi[w] = ph[sel]
        done_t[w] = ts[sel]
        out_b[w] = bm[sel]
        for f in _QFIELDS:
            getattr(out_q, f)[w] = getattr(qn, f)[sel]
        for src, dst in ((yn, out_y), (zpn, out_zp), (zmn, out_zm)):
            if src is not None:
                for f in ("y", "logp", "phi_eps", "q"):
                    getattr(dst, f)[w] = getattr(src, f)[sel]

    k = 0
    sb = start_boundary
    e1 = np.zeros(n)
    e2 = np.zeros(n)
    mt = np.zeros(n)
    sx = supxi2.copy()
    while pos.size and k < nmax:
        bmask = update_regime_mask(bmask, dom.psi(x), params)
        if aux_off:
            z = np.zeros(pos.size)
            aux = AuxProcesses(z, z, np.zeros((pos.size, d1)), np.zeros((pos.size, d1)),
                               np.zeros((pos.size, d, d)), np.zeros((pos.size, d, d)), bmask)
        else:
            aux = aux_glued(dom, x, qs.xi, qs.xi_tilde, params, ctl.sigma, bmask)
        dw = sq * rng.normals(seed, rng.BASE, pid, k, d1)
        if track_y:
            y = step_perturbed_first(y, aux, ctl, eps, dw, dt)
        if track_z:
            zp = step_perturbed_second(zp, aux, ctl, eps, dw, dt)
            zm = step_perturbed_second(zm, aux, ctl, -eps, dw, dt)
        qn = step_quasi(qs, aux, ctl, x, phi, dw, dt)
        xn = x + dw @ ctl.sigma.T + ctl.b * dt
        phi = phi + ctl.c * dt
        t = t + dt
        if track_y:
            if eps != 0:
                e1 = np.maximum(e1, np.linalg.norm((y.y - xn) / eps - qn.xi, axis=1))
        if track_z:
            if eps != 0:
                e2 = np.maximum(e2, np.linalg.norm((zp.y - 2 * xn + zm.y) / (eps * eps) - qn.eta, axis=1))
        mt = np.maximum(mt, np.abs(qn.eta_tilde))
        sx = np.maximum(sx, (qn.xi * qn.xi).sum(1))
        sm = stopped_mask(xn, qn, y, zp, zm, bmask, sb)
        if stop.interp and sm.any():
            # move x and xi back to the stop level along the step
            pv = dom.psi(xn)
            target = np.where(sb, np.where(pv >= params.lam, params.lam, level_int if stop.region_exit else level),
                              level_int if stop.region_exit else level)
            low = sm & (pv <= target)
            if low.any():
                s, pt = _bisect(dom, x[low], xn[low], target[low], 60)
                xn = xn.copy()
                xn[low] = pt
                qn.xi[low] = qs.xi[low] + s[:, None] * (qn.xi[low] - qs.xi[low])
        x, qs = xn, qn
        if sm.any():
            store(sm, x, qs, y, zp, zm, bmask, t, phi)
            err1[pos[sm]] = e1[sm]
            err2[pos[sm]] = e2[sm]
            maxet[pos[sm]] = mt[sm]
            supxi2[pos[sm]] = sx[sm]
            done[pos[sm]] = True
            keep = ~sm
            pos, pid, x, phi, t, bmask, sb = pos[keep], pid[keep], x[keep], phi[keep], t[keep], bmask[keep], sb[keep]
            e1, e2, mt, sx = e1[keep], e2[keep], mt[keep], sx[keep]
            qs = qs.take(keep)
            if track_y:
                y = PerturbedState(y.y[keep], y.logp[keep], y.phi_eps[keep], y.q[keep])
            if track_z:
                zp = PerturbedState(zp.y[keep], zp.logp[keep], zp.phi_eps[keep], zp.q[keep])
                zm = PerturbedState(zm.y[keep], zm.logp[keep], zm.phi_eps[keep], zm.q[keep])
        k += 1
    if pos.size:
        store(np.ones(pos.size, dtype=bool), x, qs, y, zp, zm, bmask, t, phi)
        err1[pos] = e1
        err2[pos] = e2
        maxet[pos] = mt
        supxi2[pos] = sx
    return CoupledResult(done_t, out_x, out_phi, out_q, out_b, nsw, out_y, out_zp, out_zm,
                         err1 if track_y else None, err2 if track_z else None, maxet, supxi2)
