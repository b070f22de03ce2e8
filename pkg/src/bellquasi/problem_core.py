"""Control problem data: controls, domain function, payoffs and the
structural checks on them (drift condition, rotation invariance,
weak nondegeneracy)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar


class ConfigError(ValueError):
    """Invalid problem definition; `path` names the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class DomainError(ValueError):
    pass


# --------------------------------------------------------------------------
# scalar fields with derivatives


@dataclass(frozen=True)
class Field:
    """Scalar field u(x) = x.A.x + b.x + c, vectorised over leading axes.

    `one`, `zero` and linear fields are special cases. Derivatives are exact.
    """

    A: np.ndarray
    b: np.ndarray
    c: float
    name: str = "quadratic"

    def value(self, x):
        x = np.asarray(x)
        return ((x @ self.A) * x).sum(-1) + x @ self.b + self.c

    def grad(self, x):
        x = np.asarray(x)
        return x @ (self.A + self.A.T).T + self.b

    def hess(self, x):
        x = np.asarray(x)
        return np.broadcast_to(self.A + self.A.T, x.shape[:-1] + self.A.shape)

    def sup_abs(self, pts) -> float:
        if len(pts) == 0:
            return abs(self.c)
        return float(np.max(np.abs(self.value(pts))))

    def is_constant(self) -> bool:
        return not (np.any(self.A) or np.any(self.b))

    def to_json(self):
        if self.is_constant() and self.c in (0.0, 1.0):
            return "one" if self.c == 1.0 else "zero"
        return {"name": "quadratic", "A": self.A.tolist(), "b": self.b.tolist(), "c": self.c}


def const_field(d: int, c: float) -> Field:
    return Field(np.zeros((d, d)), np.zeros(d), float(c), "one" if c == 1 else "const")


def parse_field(spec, d: int, path: str) -> Field:
    if spec == "one":
        return const_field(d, 1.0)
    if spec == "zero":
        return const_field(d, 0.0)
    if isinstance(spec, dict) and spec.get("name") == "quadratic":
        try:
            A = np.asarray(spec.get("A", np.zeros((d, d))), dtype=float).reshape(d, d)
            b = np.asarray(spec.get("b", np.zeros(d)), dtype=float).reshape(d)
            c = float(spec.get("c", 0.0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, f"bad quadratic coefficients ({exc})") from None
        return Field(A, b, c)
    raise ConfigError(path, f"unknown field {spec!r}")


# --------------------------------------------------------------------------
# domain


def _ball_fns(radius: float, center: np.ndarray):
    r2 = radius * radius

    def psi(x):
        y = x - center
        return r2 - (y * y).sum(-1)

    def grad(x):
        return -2.0 * (x - center)

    def hess(x):
        d = center.shape[0]
        return np.broadcast_to(-2.0 * np.eye(d), np.shape(x)[:-1] + (d, d))

    return psi, grad, hess


def _ellipse_fns(axes: np.ndarray):
    w = 1.0 / axes ** 2

    def psi(x):
        return 1.0 - (x * x * w).sum(-1)

    def grad(x):
        return -2.0 * x * w

    def hess(x):
        d = axes.shape[0]
        return np.broadcast_to(np.diag(-2.0 * w), np.shape(x)[:-1] + (d, d))

    return psi, grad, hess


LEVELSETS = {"ellipse": _ellipse_fns}


@dataclass(frozen=True)
class DomainFn:
    """D = {psi > 0}. `scale` multiplies psi and its derivatives.

    The raw callables accept arrays of shape (..., d); they use only
    elementwise arithmetic so object arrays of mpmath numbers work too.
    """

    psi_raw: Callable
    grad_raw: Callable
    hess_raw: Callable
    scale: float
    box_lo: np.ndarray
    box_hi: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.box_lo.shape[0]

    def psi(self, x):
        return self.scale * self.psi_raw(x)

    def grad(self, x):
        return self.scale * self.grad_raw(x)

    def hess(self, x):
        return self.scale * self.hess_raw(x)

    def rescaled(self, factor: float) -> "DomainFn":
        return replace(self, scale=self.scale * factor)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_hi - self.box_lo))

    def contains(self, x) -> np.ndarray:
        return self.psi(x) > 0

    def to_json(self):
        out = dict(self.meta)
        out["scale"] = self.scale
        return out


def ball_domain(d: int, radius: float = 1.0, scale: float = 1.0, center=None) -> DomainFn:
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    psi, g, h = _ball_fns(radius, c)
    return DomainFn(psi, g, h, scale, c - radius, c + radius,
                    {"type": "ball", "radius": radius})


def ellipse_domain(axes, scale: float = 1.0) -> DomainFn:
    axes = np.asarray(axes, dtype=float)
    psi, g, h = _ellipse_fns(axes)
    return DomainFn(psi, g, h, scale, -axes, axes,
                    {"type": "levelset", "name": "ellipse", "axes": axes.tolist()})


def eval_domain(domain: DomainFn, x):
    x = np.asarray(x, dtype=float)
    p = domain.psi(x)
    g = domain.grad(x)
    H = domain.hess(x)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise DomainError(f"non-finite domain data at {x}")
    return float(p) if np.ndim(p) == 0 else p, g, 0.5 * (H + np.swapaxes(H, -1, -2))


def fd_domain_derivatives(domain: DomainFn, x, step: Optional[float] = None):
    """Central-difference gradient and Hessian, for cross-checking."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    h = 1e-5 * domain.diameter() if step is None else step
    E = np.eye(d) * h
    g = np.array([(domain.psi(x + E[i]) - domain.psi(x - E[i])) / (2 * h) for i in range(d)])
    H = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            H[i, j] = (domain.psi(x + E[i] + E[j]) - domain.psi(x + E[i] - E[j])
                       - domain.psi(x - E[i] + E[j]) + domain.psi(x - E[i] - E[j])) / (4 * h * h)
    return g, 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# controls and problem


@dataclass(frozen=True)
class ControlPoint:
    sigma: np.ndarray
    b: np.ndarray
    c: float
    f: Field

    @property
    def a(self) -> np.ndarray:
        return 0.5 * self.sigma @ self.sigma.T

    def sigma_norm(self) -> float:
        return float(np.linalg.norm(self.sigma))


@dataclass(frozen=True)
class ProblemSpec:
    controls: tuple
    g: Field
    domain: DomainFn
    k0: float
    d: int
    d1: int

    def __post_init__(self):
        if len(self.controls) == 0:
            raise ConfigError("controls", "control list is empty")

    def sample_interior(self, n: int, seed: int = 0) -> np.ndarray:
        """Uniform points of D by rejection from the bounding box."""
        rng = np.random.default_rng(seed)
        out = []
        got = 0
        while got < n:
            pts = rng.uniform(self.domain.box_lo, self.domain.box_hi, size=(4 * n + 16, self.d))
            pts = pts[self.domain.contains(pts)]
            out.append(pts)
            got += len(pts)
        return np.concatenate(out)[:n]

    def validate(self, n_check: int = 256) -> None:
        pts = self.sample_interior(n_check)
        for i, ctl in enumerate(self.controls):
            p = f"controls[{i}]"
            if ctl.sigma.shape != (self.d, self.d1):
                raise ConfigError(p + ".sigma", f"expected shape {(self.d, self.d1)}")
            if ctl.b.shape != (self.d,):
                raise ConfigError(p + ".b", "dimension mismatch")
            if ctl.c < 0:
                raise ConfigError(p + ".c", "discount rate must be nonnegative")
            tol = self.k0 * (1 + 1e-12)
            if ctl.sigma_norm() > tol or np.linalg.norm(ctl.b) > tol or ctl.c > tol:
                raise ConfigError(p, "coefficient exceeds k0")
            if ctl.f.sup_abs(pts) > tol:
                raise ConfigError(p + ".f", "sup |f| exceeds k0")
            if np.linalg.eigvalsh(ctl.a).min() < -1e-12:
                raise ConfigError(p + ".sigma", "a is not positive semidefinite")
        if self.g.sup_abs(pts) > self.k0 * (1 + 1e-12):
            raise ConfigError("g", "sup |g| exceeds k0")

    def with_domain(self, domain: DomainFn) -> "ProblemSpec":
        return replace(self, domain=domain)

    def single(self, index: int) -> "ProblemSpec":
        return replace(self, controls=(self.controls[index],))

    def stacked(self):
        """Arrays over controls: sigma (m,d,d1), b (m,d), c (m,)."""
        sig = np.stack([c.sigma for c in self.controls])
        b = np.stack([c.b for c in self.controls])
        c = np.array([c.c for c in self.controls])
        return sig, b, c

    def to_json(self) -> dict:
        return {
            "dimension": self.d,
            "noise_dimension": self.d1,
            "k0": self.k0,
            "domain": self.domain.to_json(),
            "controls": [{"sigma": c.sigma.ravel().tolist(), "b": c.b.tolist(), "c": c.c,
                          "f": c.f.to_json()} for c in self.controls],
            "g": self.g.to_json(),
        }


def tp1(d: int = 2) -> ProblemSpec:
    """Unit ball, a = I, f = 1, g = 0. Exact v = (1 - |x|^2) / (2d)."""
    ctl = ControlPoint(math.sqrt(2.0) * np.eye(d), np.zeros(d), 0.0, const_field(d, 1.0))
    return ProblemSpec((ctl,), const_field(d, 0.0), ball_domain(d), 2.0 * math.sqrt(d), d, d)


def direction_grid(n_dirs: int) -> np.ndarray:
    ang = np.arange(n_dirs) * np.pi / n_dirs
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def tp2(n_dirs: int = 32) -> ProblemSpec:
    """Unit disk, rank-one controls a = e e^T on a grid of directions."""
    ctls = tuple(ControlPoint(math.sqrt(2.0) * e.reshape(2, 1), np.zeros(2), 0.0, const_field(2, 1.0))
                 for e in direction_grid(n_dirs))
    return ProblemSpec(ctls, const_field(2, 0.0), ball_domain(2), 2.0, 2, 1)


# --------------------------------------------------------------------------
# JSON loading


def _get(doc, key, path):
    if key not in doc:
        raise ConfigError(path + key, "missing")
    return doc[key]


def problem_from_dict(doc: dict) -> ProblemSpec:
    if not isinstance(doc, dict):
        raise ConfigError("$", "expected an object")
    try:
        d = int(_get(doc, "dimension", ""))
        d1 = int(_get(doc, "noise_dimension", ""))
        k0 = float(_get(doc, "k0", ""))
    except (TypeError, ValueError):
        raise ConfigError("dimension", "dimensions and k0 must be numbers") from None
    if d < 1 or d1 < 1:
        raise ConfigError("dimension", "must be positive")
    if k0 < 1:
        raise ConfigError("k0", "must be >= 1")
    dom = _get(doc, "domain", "")
    kind = dom.get("type") if isinstance(dom, dict) else None
    scale = float(dom.get("scale", 1.0)) if isinstance(dom, dict) else 1.0
    if kind == "ball":
        domain = ball_domain(d, float(dom.get("radius", 1.0)), scale, dom.get("center"))
    elif kind == "levelset":
        name = dom.get("name")
        if name not in LEVELSETS:
            raise ConfigError("domain.name", f"unknown level set {name!r}")
        if name == "ellipse":
            axes = dom.get("axes")
            if axes is None or len(axes) != d:
                raise ConfigError("domain.axes", "need one axis per dimension")
            domain = ellipse_domain(axes, scale)
    else:
        raise ConfigError("domain.type", f"unknown domain {kind!r}")
    raw = _get(doc, "controls", "")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("controls", "must be a non-empty list")
    ctls = []
    for i, c in enumerate(raw):
        p = f"controls[{i}]"
        try:
            sig = np.asarray(_get(c, "sigma", p + "."), dtype=float).reshape(d, d1)
        except ValueError:
            raise ConfigError(p + ".sigma", f"need {d * d1} entries (row-major)") from None
        b = np.asarray(c.get("b", [0.0] * d), dtype=float)
        if b.shape != (d,):
            raise ConfigError(p + ".b", "dimension mismatch")
        ctls.append(ControlPoint(sig, b, float(c.get("c", 0.0)), parse_field(c.get("f", "zero"), d, p + ".f")))
    g = parse_field(doc.get("g", "zero"), d, "g")
    prob = ProblemSpec(tuple(ctls), g, domain, k0, d, d1)
    prob.validate()
    return prob


def load_problem(path) -> ProblemSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON ({exc})") from None
    return problem_from_dict(doc)


# --------------------------------------------------------------------------
# structural checks


def generator_on_psi(problem: ProblemSpec, x) -> np.ndarray:
    """L^alpha psi at points x, shape (n, m)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = problem.domain.grad(x)
    H = problem.domain.hess(x)
    out = np.empty((x.shape[0], len(problem.controls)))
    for k, c in enumerate(problem.controls):
        out[:, k] = np.einsum("ij,nij->n", c.a, H) + g @ c.b
    return out


def check_drift_condition(problem: ProblemSpec, samples) -> dict:
    samples = np.asarray(samples, dtype=float).reshape(-1, problem.d)
    if samples.shape[0] == 0:
        return {"max_drift": -math.inf, "pass": True}
    inside = problem.domain.contains(samples)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise DomainError(f"sample {bad} lies outside D")
    m = float(generator_on_psi(problem, samples).max())
    return {"max_drift": m, "pass": m <= -1.0}


def normalize_domain_scale(problem: ProblemSpec, samples=None) -> ProblemSpec:
    if samples is None:
        samples = problem.sample_interior(512)
    rep = check_drift_condition(problem, samples)
    if not rep["pass"]:
        raise DomainError(f"drift condition fails (max L psi = {rep['max_drift']:.4g}); cannot normalize")
    need = 4.0 * (max(c.sigma_norm() ** 2 for c in problem.controls)
                  + max(float(c.b @ c.b) for c in problem.controls))
    have = float(np.min(np.abs(generator_on_psi(problem, samples))))
    if need <= 0:
        raise DomainError("all controls vanish; scale factor would be 0")
    factor = need / have
    if factor <= 1.0:
        return problem
    return problem.with_domain(problem.domain.rescaled(factor))


def check_orthogonal_invariance(problem: ProblemSpec, rotations, tol: float) -> dict:
    A = [c.a for c in problem.controls]
    worst = 0.0
    for O in rotations:
        O = np.asarray(O, dtype=float)
        if np.linalg.norm(O @ O.T - np.eye(O.shape[0])) > max(tol, 1e-12):
            raise ValueError("rotation matrix is not orthogonal")
        for a in A:
            rot = O @ a @ O.T
            worst = max(worst, min(float(np.linalg.norm(rot - b)) for b in A))
    return {"max_defect": worst, "pass": worst <= tol}


def rotation2(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class NondegeneracyReport:
    mu: float
    mu_of_xi: dict
    direction_grid_size: int


def _sphere_grid(d: int, n: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = np.arange(n) * 2 * np.pi / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # Fibonacci sphere for d = 3
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)


def _mu_xi(A: np.ndarray, xi: np.ndarray, grid: np.ndarray) -> float:
    if A.shape[0] == 1:
        a = A[0]
        # min zeta.a.zeta on (xi, zeta) = 1 is 1 / xi.a^+.xi when xi lies in range(a)
        ap = np.linalg.pinv(a)
        if np.linalg.norm(a @ ap @ xi - xi) > 1e-9 * np.linalg.norm(xi):
            return 0.0
        return float(1.0 / (xi @ ap @ xi))

    def val(z):
        return float(np.max(np.einsum("i,mij,j->m", z, A, z)))

    dots = grid @ xi
    ok = dots > 1e-12
    Z = grid[ok] / dots[ok, None]
    vals = np.max(np.einsum("ni,mij,nj->nm", Z, A, Z), axis=1)
    best = float(vals.min())
    if xi.shape[0] == 2:
        # refine along the affine line zeta = xi/|xi|^2 + t xi_perp (convex in t)
        base = xi / (xi @ xi)
        perp = np.array([-xi[1], xi[0]]) / np.linalg.norm(xi)
        z0 = Z[int(np.argmin(vals))]
        t0 = float((z0 - base) @ perp)
        span = 8.0 * np.pi / grid.shape[0] * (1.0 + t0 * t0) / np.linalg.norm(xi)
        res = minimize_scalar(lambda t: val(base + t * perp), bounds=(t0 - span, t0 + span),
                              method="bounded", options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return best


def nondegeneracy(problem: ProblemSpec, n_dirs: int, probes) -> NondegeneracyReport:
    if n_dirs < 8:
        raise ValueError("n_dirs must be >= 8")
    A = np.stack([c.a for c in problem.controls])
    grid = _sphere_grid(problem.d, n_dirs)
    quad = np.einsum("ni,mij,nj->nm", grid, A, grid)
    mu = float(np.max(quad, axis=1).min())
    out = {}
    for p in probes:
        xi = np.asarray(p, dtype=float)
        if not np.any(xi):
            raise ValueError("zero probe direction")
        out[tuple(xi.tolist())] = _mu_xi(A, xi, grid)
    return NondegeneracyReport(mu, out, n_dirs)


BOUNDARY_STRIP = "BOUNDARY_STRIP"
OVERLAP = "OVERLAP"
INTERIOR = "INTERIOR"
OUTSIDE = "OUTSIDE_Ddelta"


def region_of_psi(psi: float, delta: float, lam: float) -> str:
    if psi <= delta:
        return OUTSIDE
    if psi <= lam * lam:
        return BOUNDARY_STRIP
    if psi < lam:
        return OVERLAP
    return INTERIOR


def region(domain: DomainFn, x, delta: float, lam: float) -> str:
    if not (0 < delta < lam * lam < lam < 1):
        raise ValueError("need 0 < delta < lambda^2 < lambda < 1")
    return region_of_psi(float(domain.psi(np.asarray(x, dtype=float))), delta, lam)
