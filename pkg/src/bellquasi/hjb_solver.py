"""Finite-difference policy iteration for the Dirichlet Bellman problem

    sup_a [ a_ij u_ij + b_i u_i - c u + f ] = 0 in D,   u = g on the boundary,

on a regular grid (d = 1 or 2) with an optional regularization of the
diffusion matrices.

Each matrix a is written as a nonnegative combination of rank-one terms
e e^T with integer offsets e (the nine-point splitting when a is diagonally
dominant, Selling's decomposition otherwise), so every stencil is monotone.
Arms that leave D end at the exact boundary crossing (Shortley-Weller), which
makes the scheme exact on quadratics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .problem_core import DomainFn, ProblemSpec
from .sde_engine import PolicySpec, _bisect

GENERATOR = "GENERATOR"  # a + eps^2/2 I: an independent eps dW in the dynamics
REMARK = "REMARK"  # a + eps I

SCHEMES = ("nine_point", "selling", "auto")


class MonotonicityError(ValueError):
    def __init__(self, cell, eps_required: float, msg: str = ""):
        self.cell = cell
        self.eps_required = eps_required
        super().__init__(msg or f"stencil not monotone at cell {cell}; need eps_reg >= {eps_required:.6g}")


class HowardError(RuntimeError):
    def __init__(self, history):
        self.history = list(history)
        super().__init__(f"policy iteration did not converge; residual history {self.history}")


# --------------------------------------------------------------------------
# grid


@dataclass
class Grid:
    h: float
    lo: np.ndarray
    shape: tuple
    psi: np.ndarray  # on all nodes, flattened
    index: np.ndarray  # node -> unknown number, -1 if not interior
    nodes: np.ndarray  # coordinates of the interior nodes, (n, d)
    domain: DomainFn

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    def multi_index(self) -> np.ndarray:
        flat = np.flatnonzero(self.index >= 0)
        return np.stack(np.unravel_index(flat, self.shape), axis=1)

    def point(self, ij) -> np.ndarray:
        return self.lo + self.h * np.asarray(ij, dtype=float)


def make_grid(domain: DomainFn, h: float) -> Grid:
    if not h > 0:
        raise ValueError("h must be positive")
    d = domain.d
    if d not in (1, 2):
        raise ValueError("grids support d = 1 and d = 2 only")
    # align the lattice with the origin
    lo = np.floor(np.asarray(domain.box_lo, dtype=float) / h - 1e-9) * h
    hi = np.ceil(np.asarray(domain.box_hi, dtype=float) / h + 1e-9) * h
    shape = tuple(int(round((hi[k] - lo[k]) / h)) + 1 for k in range(d))
    axes = [lo[k] + h * np.arange(shape[k]) for k in range(d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    psi = domain.psi(pts)
    inside = psi > 0
    index = np.full(psi.shape[0], -1, dtype=np.int64)
    index[inside] = np.arange(int(inside.sum()))
    return Grid(float(h), lo, shape, psi, index, pts[inside], domain)


# --------------------------------------------------------------------------
# stencil decompositions


def _nine_point(A: np.ndarray):
    if A.shape == (1, 1):
        return [((1,), float(A[0, 0]))], True
    a11, a22, a12 = A[0, 0], A[1, 1], A[0, 1]
    ok = a11 >= abs(a12) - 1e-14 and a22 >= abs(a12) - 1e-14
    terms = [((1, 0), max(a11 - abs(a12), 0.0)), ((0, 1), max(a22 - abs(a12), 0.0))]
    if a12 != 0:
        terms.append(((1, 1 if a12 > 0 else -1), abs(a12)))
    return terms, ok


def _selling(A: np.ndarray, max_iter: int = 10000):
    """A = sum w_k e_k e_k^T with w_k >= 0 from an obtuse superbase."""
    if A.shape == (1, 1):
        return [((1,), float(A[0, 0]))]
    e = [np.array([1, 0]), np.array([0, 1]), np.array([-1, -1])]
    for _ in range(max_iter):
        done = True
        for i, j, k in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
            if e[i] @ A @ e[j] > 1e-14 * np.trace(A):
                e = [-e[i], e[j], e[i] - e[j]]
                done = False
                break
        if done:
            break
    else:
        raise MonotonicityError(None, math.nan, "Selling reduction did not terminate; regularize")
    terms = []
    for i, j, k in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
        w = -float(e[i] @ A @ e[j])
        if w > 0:
            v = np.array([-e[k][1], e[k][0]])
            terms.append((tuple(int(t) for t in v), w))
    return terms


def regularized(a: np.ndarray, eps_reg: float, convention: str) -> np.ndarray:
    if convention == GENERATOR:
        return a + 0.5 * eps_reg * eps_reg * np.eye(a.shape[0])
    if convention == REMARK:
        return a + eps_reg * np.eye(a.shape[0])
    raise ValueError(f"unknown convention {convention!r}")


def _required_eps(a: np.ndarray, convention: str) -> float:
    gap = max(abs(a[0, 1]) - a[0, 0], abs(a[0, 1]) - a[1, 1], 0.0)
    return math.sqrt(2 * gap) if convention == GENERATOR else gap


def decompose(a: np.ndarray, eps_reg: float = 0.0, convention: str = GENERATOR, scheme: str = "auto"):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    A = regularized(np.asarray(a, dtype=float), eps_reg, convention)
    if scheme in ("nine_point", "auto"):
        terms, ok = _nine_point(A)
        if ok:
            return [t for t in terms if t[1] > 0]
        if scheme == "nine_point":
            raise MonotonicityError(None, _required_eps(np.asarray(a, dtype=float), convention))
    return _selling(A)


# --------------------------------------------------------------------------
# arms


@dataclass
class Arm:
    """Neighbour data along x + s h e for every interior node."""
    idx: np.ndarray  # unknown number of the neighbour, -1 at a boundary crossing
    s: np.ndarray  # fraction of the step (1 for a grid neighbour)
    gval: np.ndarray  # boundary value at the crossing (0 where idx >= 0)


def _arm(grid: Grid, g, off) -> Arm:
    mi = grid.multi_index()
    off = np.asarray(off, dtype=np.int64)
    tgt = mi + off
    inbox = np.all((tgt >= 0) & (tgt < np.asarray(grid.shape)), axis=1)
    idx = np.full(grid.n, -1, dtype=np.int64)
    flat = np.ravel_multi_index(tuple(np.where(inbox[:, None], tgt, 0).T), grid.shape)
    idx[inbox] = grid.index[flat[inbox]]
    s = np.ones(grid.n)
    gval = np.zeros(grid.n)
    out = idx < 0
    if out.any():
        xa = grid.nodes[out]
        xb = xa + grid.h * off
        # far end may leave the box; D is convex so the crossing is unique
        sc, pt = _bisect(grid.domain, xa, xb, 0.0, 200)
        s[out] = np.maximum(sc, 1e-8)
        gval[out] = g.value(pt)
    return Arm(idx, s, gval)


class _ArmCache:
    def __init__(self, grid: Grid, g):
        self.grid, self.g, self.c = grid, g, {}

    def get(self, off) -> Arm:
        key = tuple(int(t) for t in off)
        if key not in self.c:
            self.c[key] = _arm(self.grid, self.g, key)
        return self.c[key]


# --------------------------------------------------------------------------
# discretization


@dataclass
class Stencils:
    """Per-control operators: (L_a u)_i = (M_a u)_i + r_a,i."""
    M: list
    r: list  # boundary contributions (without f)
    f: list
    terms: list  # decompositions, for inspection
    eps_reg: float
    convention: str


def _second_diff(rows, cols, vals, rhs, w, h, ap: Arm, am: Arm):
    n = rhs.shape[0]
    i = np.arange(n)
    sp_, sm_ = ap.s, am.s
    cp = 2 * w / (h * h * sp_ * (sp_ + sm_))
    cm = 2 * w / (h * h * sm_ * (sp_ + sm_))
    rows.append(i)
    cols.append(i)
    vals.append(-(cp + cm))
    for arm, c in ((ap, cp), (am, cm)):
        inn = arm.idx >= 0
        rows.append(i[inn])
        cols.append(arm.idx[inn])
        vals.append(c[inn])
        rhs += np.where(inn, 0.0, c * arm.gval)


def discretize(problem: ProblemSpec, grid: Grid, eps_reg: float = 0.0, convention: str = GENERATOR,
               scheme: str = "auto", arms: Optional[_ArmCache] = None) -> Stencils:
    if eps_reg < 0:
        raise ValueError("eps_reg must be >= 0")
    arms = arms or _ArmCache(grid, problem.g)
    n, h, d = grid.n, grid.h, grid.d
    Ms, rs, fs, allterms = [], [], [], []
    for ci, ctl in enumerate(problem.controls):
        try:
            terms = decompose(ctl.a, eps_reg, convention, scheme)
        except MonotonicityError as err:
            raise MonotonicityError((ci, "all cells"), err.eps_required) from None
        rows, cols, vals = [], [], []
        rhs = np.zeros(n)
        for off, w in terms:
            neg = tuple(-t for t in off)
            _second_diff(rows, cols, vals, rhs, w, h, arms.get(off), arms.get(neg))
        i = np.arange(n)
        for k in range(d):
            bk = float(ctl.b[k])
            if bk == 0:
                continue
            e = [0] * d
            e[k] = 1 if bk > 0 else -1
            arm = arms.get(e)
            c = abs(bk) / (h * arm.s)
            rows.append(i)
            cols.append(i)
            vals.append(-c)
            inn = arm.idx >= 0
            rows.append(i[inn])
            cols.append(arm.idx[inn])
            vals.append(c[inn])
            rhs += np.where(inn, 0.0, c * arm.gval)
        if ctl.c:
            rows.append(i)
            cols.append(i)
            vals.append(np.full(n, -float(ctl.c)))
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        M.sum_duplicates()
        _assert_monotone(M)
        Ms.append(M)
        rs.append(rhs)
        fs.append(ctl.f.value(grid.nodes))
        allterms.append(terms)
    return Stencils(Ms, rs, fs, allterms, eps_reg, convention)


def _assert_monotone(M) -> None:
    diag = M.diagonal()
    off = M - sp.diags(diag)
    if np.any(diag > 0) or (off.nnz and off.data.min() < 0):
        raise MonotonicityError(int(np.argmax(diag)), math.nan, "stencil has wrong-sign weights")


# --------------------------------------------------------------------------
# policy iteration


@dataclass
class DiscreteSolution:
    grid: Grid
    u: np.ndarray
    policy: np.ndarray
    residual: np.ndarray
    eps_reg: float
    iterations: int
    history: list = field(default_factory=list)  # u after each Howard step

    def full(self, fill=np.nan) -> np.ndarray:
        out = np.full(self.grid.index.shape[0], fill, dtype=float)
        m = self.grid.index >= 0
        out[m] = self.u[self.grid.index[m]]
        return out.reshape(self.grid.shape)

    def value_at(self, x, g=None) -> float:
        """Multilinear interpolation; corners outside D take g (or 0)."""
        x = np.asarray(x, dtype=float)
        t = (x - self.grid.lo) / self.grid.h
        base = np.floor(t + 1e-12).astype(int)
        fr = t - base
        tot = 0.0
        d = self.grid.d
        for corner in np.ndindex(*(2,) * d):
            c = base + np.array(corner)
            w = float(np.prod(np.where(np.array(corner) == 1, fr, 1 - fr)))
            if w == 0:
                continue
            if np.any(c < 0) or np.any(c >= np.array(self.grid.shape)):
                val = 0.0
            else:
                k = self.grid.index[np.ravel_multi_index(tuple(c), self.grid.shape)]
                if k >= 0:
                    val = self.u[k]
                else:
                    val = float(g.value(self.grid.point(c))) if g is not None else 0.0
            tot += w * val
        return tot

    def feedback_policy(self) -> PolicySpec:
        table = np.zeros(self.grid.index.shape[0], dtype=np.int64)
        m = self.grid.index >= 0
        table[m] = self.policy[self.grid.index[m]]
        return PolicySpec.feedback(table.reshape(self.grid.shape), self.grid.lo, self.grid.h)


def _residuals(st: Stencils, u):
    return np.stack([M @ u + r + f for M, r, f in zip(st.M, st.r, st.f)])


def policy_iteration(stencils: Stencils, grid: Grid, tol: float = 1e-12, max_iters: int = 50,
                     policy0=None) -> DiscreteSolution:
    n = grid.n
    m = len(stencils.M)
    pol = np.zeros(n, dtype=np.int64) if policy0 is None else np.asarray(policy0, dtype=np.int64).copy()
    big = sp.vstack(stencils.M, format="csr")
    rr = np.concatenate([r + f for r, f in zip(stencils.r, stencils.f)])
    # residuals are compared in units of u: divided by the largest diagonal entry
    dscale = np.max(np.abs(np.stack([M.diagonal() for M in stencils.M])), axis=0)
    dscale = np.where(dscale > 0, dscale, 1.0)
    hist_res, hist_u = [], []
    for it in range(1, max_iters + 1):
        rows = pol * n + np.arange(n)
        A = big[rows]
        u = spsolve(A.tocsc(), -rr[rows])
        hist_u.append(u)
        R = _residuals(stencils, u) / dscale
        best = R.max(axis=0)
        res = float(np.max(np.abs(best)))
        hist_res.append(res)
        cur = R[pol, np.arange(n)]
        # switch only on an improvement above roundoff, so ties cannot cycle
        new = np.where(best > cur + tol, R.argmax(axis=0), pol)
        if res <= tol or np.array_equal(new, pol):
            if res > tol:
                raise HowardError(hist_res)
            return DiscreteSolution(grid, u, pol, best * dscale, stencils.eps_reg, it, hist_u)
        pol = new
    raise HowardError(hist_res)


def solve(problem: ProblemSpec, h: float, eps_reg: float = 0.0, convention: str = GENERATOR,
          scheme: str = "auto", tol: float = 1e-12, max_iters: int = 50) -> DiscreteSolution:
    grid = make_grid(problem.domain, h)
    st = discretize(problem, grid, eps_reg, convention, scheme)
    return policy_iteration(st, grid, tol, max_iters)


def continuation_in_eps(problem: ProblemSpec, grid: Grid, eps_list: Sequence[float],
                        convention: str = GENERATOR, scheme: str = "auto", tol: float = 1e-12,
                        max_iters: int = 50):
    """Solve for decreasing eps, warm-starting policies; returns (solutions, sup deltas)."""
    eps_list = list(eps_list)
    if any(e <= 0 for e in eps_list) or any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be positive and strictly decreasing")
    arms = _ArmCache(grid, problem.g)
    sols, deltas = [], []
    pol = None
    for e in eps_list:
        st = discretize(problem, grid, e, convention, scheme, arms)
        s = policy_iteration(st, grid, tol, max_iters, pol)
        pol = s.policy
        if sols:
            deltas.append(float(np.max(np.abs(s.u - sols[-1].u))))
        sols.append(s)
    return sols, deltas


# --------------------------------------------------------------------------
# derivative fields


@dataclass
class DerivativeFields:
    grad: np.ndarray  # (n, d)
    hess: np.ndarray  # (n, d, d)
    near_boundary: np.ndarray  # some arm ends on the boundary
    dist: np.ndarray  # psi / |grad psi|, a distance proxy


def _line_second(u, arm_p: Arm, arm_m: Arm, h):
    up = np.where(arm_p.idx >= 0, u[np.maximum(arm_p.idx, 0)], arm_p.gval)
    um = np.where(arm_m.idx >= 0, u[np.maximum(arm_m.idx, 0)], arm_m.gval)
    a, b = arm_p.s, arm_m.s
    return 2.0 / (h * h * (a + b)) * ((up - u) / a - (u - um) / b)


def _line_first(u, arm_p: Arm, arm_m: Arm, h):
    up = np.where(arm_p.idx >= 0, u[np.maximum(arm_p.idx, 0)], arm_p.gval)
    um = np.where(arm_m.idx >= 0, u[np.maximum(arm_m.idx, 0)], arm_m.gval)
    a, b = arm_p.s, arm_m.s
    return (b * b * (up - u) + a * a * (u - um)) / (h * a * b * (a + b))


def derivative_fields(solution: DiscreteSolution, g) -> DerivativeFields:
    """Gradient and Hessian by (non-uniform) central differences; arms that
    cross the boundary use g at the crossing point."""
    grid = solution.grid
    arms = _ArmCache(grid, g)
    u = solution.u
    h = grid.h
    d = grid.d
    n = grid.n
    grad = np.zeros((n, d))
    hess = np.zeros((n, d, d))
    near = np.zeros(n, dtype=bool)
    for k in range(d):
        e = [0] * d
        e[k] = 1
        ap, am = arms.get(e), arms.get([-t for t in e])
        grad[:, k] = _line_first(u, ap, am, h)
        hess[:, k, k] = _line_second(u, ap, am, h)
        near |= (ap.idx < 0) | (am.idx < 0)
    if d == 2:
        dp = (arms.get((1, 1)), arms.get((-1, -1)))
        dm = (arms.get((1, -1)), arms.get((-1, 1)))
        h12 = 0.25 * (_line_second(u, *dp, h) - _line_second(u, *dm, h))
        hess[:, 0, 1] = hess[:, 1, 0] = h12
        for a in dp + dm:
            near |= a.idx < 0
    gp = grid.domain.grad(grid.nodes)
    dist = grid.domain.psi(grid.nodes) / np.maximum(np.linalg.norm(gp, axis=1), 1e-300)
    return DerivativeFields(grad, hess, near, dist)


# --------------------------------------------------------------------------
# estimate checks


def test_directions(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0]])
    r = 1 / math.sqrt(2)
    return np.array([[1.0, 0.0], [0.0, 1.0], [r, r], [r, -r]])


def _e2_correction_hessian(domain: DomainFn, x, kappa: float):
    """Hessian of |x|^2 + psi (log(psi/kappa) - 1)."""
    p = domain.psi(x)
    gp = domain.grad(x)
    Hp = domain.hess(x)
    d = x.shape[1]
    return 2 * np.eye(d) + gp[:, :, None] * gp[:, None, :] / p[:, None, None] \
        + np.log(p / kappa)[:, None, None] * Hp


def estimate_checks(solution: DiscreteSolution, problem: ProblemSpec, report=None,
                    kappa: float = 0.25, n_max: float = 1e6, zero_tol: float = 1e-8) -> dict:
    """Smallest constants N making the gradient/Hessian estimates hold on the grid.

    report: NondegeneracyReport whose mu_of_xi covers test_directions(d);
    without it the upper Hessian estimate is skipped.
    """
    grid = solution.grid
    dom = problem.domain
    df = derivative_fields(solution, problem.g)
    x = grid.nodes
    p = dom.psi(x)
    gp = dom.grad(x)
    dirs = test_directions(grid.d)
    n1 = n3l = n3u = 0.0
    upper_ok = report is not None and report.mu > zero_tol
    for xi in dirs:
        u1 = df.grad @ xi
        u2 = np.einsum("i,nij,j->n", xi, df.hess, xi)
        pxi = gp @ xi
        n1 = max(n1, float(np.max(np.abs(u1) / (1.0 + np.abs(pxi) / np.sqrt(p)))))
        n3l = max(n3l, float(np.max(np.maximum(-u2, 0.0) / (1.0 + pxi * pxi / p))))
        if upper_ok:
            mu = report.mu_of_xi[tuple(xi.tolist())]
            n3u = max(n3u, float(np.max(np.maximum(u2, 0.0) * mu * p)))
    out = {"N_e1": n1, "N_e3_lower": n3l,
           "N_e3_upper": (n3u if n3u > zero_tol else 0.0) if upper_ok else None,
           "e3_upper": "ok" if upper_ok else "inapplicable: mu = 0 or no report"}
    # (e2): convexity of u + N [|x|^2 + psi (log(psi/kappa) - 1)] on {psi <= kappa}
    sel = p <= kappa
    if sel.any():
        Hu = df.hess[sel]
        C = _e2_correction_hessian(dom, x[sel], kappa)

        def mineig(N):
            return float(np.min(np.linalg.eigvalsh(Hu + N * C)))

        if mineig(0.0) >= 0:
            N = 0.0
        elif mineig(n_max) < 0:
            N = n_max
        else:
            lo, hi = 0.0, n_max
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if mineig(mid) >= 0:
                    hi = mid
                else:
                    lo = mid
                if hi - lo <= 1e-10 * (1 + hi):
                    break
            N = hi
        out["e2"] = {"N": N, "min_eig": mineig(N), "kappa": kappa, "n_cells": int(sel.sum())}
    else:
        out["e2"] = {"N": None, "min_eig": None, "kappa": kappa, "n_cells": 0}
    return out


# --------------------------------------------------------------------------
# output


def write_solution_csv(path, solution: DiscreteSolution) -> None:
    grid = solution.grid
    mi = grid.multi_index()
    d = grid.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["i", "j", "x1", "x2"] if d == 2 else ["i", "x1"]
        w.writerow(head + ["u", "control_index", "residual"])
        for k in range(grid.n):
            row = [int(t) for t in mi[k]] + [repr(float(t)) for t in grid.nodes[k]]
            w.writerow(row + [repr(float(solution.u[k])), int(solution.policy[k]),
                              repr(float(solution.residual[k]))])
