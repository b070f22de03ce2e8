import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bellquasi import problem_core as pc
from bellquasi import quasi_engine as qe

SQ2 = math.sqrt(2)


@pytest.fixture(scope="module")
def calibrated():
    prob = pc.normalize_domain_scale(pc.tp1(2))
    params, cert = qe.calibrate_lambda(prob, n_samples=16, seed=3)
    return prob, params, cert


def test_nu_formula():
    assert qe.nu_of(1 / 6) == pytest.approx(2 / 27)
    assert qe.BarrierParams.make(0.125, 1 / 6, 1).nu == pytest.approx(0.0740740740740)


def test_params_validation():
    with pytest.raises(ValueError):
        qe.BarrierParams(0.1, 0.02, 0.2, 1)  # delta > lambda^2
    with pytest.raises(ValueError):
        qe.BarrierParams.make(0.1, 0.4, 1)
    with pytest.raises(ValueError):
        qe.BarrierParams.make(0.1, 0.2, 0.5)


def test_aux_boundary_examples():
    dom = pc.ball_domain(2)
    pr = qe.BarrierParams.make(0.5, 0.25, 1)
    sig = SQ2 * np.eye(2)
    a = qe.aux_boundary(dom, np.array([0.5, 0.0]), np.array([0.0, 1.0]), 0.0, pr, sig)
    assert a.r == pytest.approx(0.0) and a.r_hat == pytest.approx(0.0)
    assert np.allclose(a.P, [[0, -2], [2, 0]])
    a = qe.aux_boundary(dom, np.array([0.5, 0.0]), np.array([1.0, 0.0]), 0.0, pr, sig)
    assert a.r == pytest.approx(-10 / 3)
    assert np.allclose(a.P, 0)
    a = qe.aux_boundary(dom, np.array([0.5, 0.0]), np.zeros(2), 0.0, pr, sig)
    assert a.r == 0 and a.r_hat == 0 and not np.any(a.pi) and not np.any(a.P)
    assert np.allclose(a.P_hat, 0)
    with pytest.raises(ZeroDivisionError):
        qe.aux_boundary(dom, np.zeros(2), np.array([1.0, 0.0]), 0.0, pr, sig)


def test_aux_interior_example():
    dom = pc.ball_domain(2)
    pr = qe.BarrierParams.make(0.125, 1 / 6, 1)
    a = qe.aux_interior(dom, np.array([0.5, 0.0]), np.array([1.0, 0.0]), 0.0, pr, SQ2 * np.eye(2))
    nu = 2 / 27
    assert a.r == pytest.approx(-2 / 9)
    assert a.pi[0] == pytest.approx(nu * 1.75 * SQ2 / 0.5625)
    assert a.pi[1] == pytest.approx(0.0)
    assert np.all(a.P == 0) and np.all(a.P_hat == 0) and a.r_hat == 0
    # tangent xi orthogonal to every sigma column is impossible for sigma = sqrt2 I; use a rank-one sigma
    sig = np.array([[SQ2], [0.0]])
    a = qe.aux_interior(dom, np.array([0.5, 0.0]), np.array([0.0, 1.0]), 0.0, pr, sig)
    assert a.r == 0 and np.all(a.pi == 0)


@given(st.floats(0.05, 0.95), st.floats(0, 2 * math.pi), st.floats(-3, 3), st.floats(-3, 3),
       st.floats(-3, 3), st.floats(-3, 3), st.booleans())
def test_aux_linear_in_xi(rad, ang, a1, a2, b1, b2, boundary):
    dom = pc.ball_domain(2, scale=4.0)
    pr = qe.BarrierParams.make(0.25, 0.25, 4)
    x = rad * np.array([math.cos(ang), math.sin(ang)])
    sig = SQ2 * np.eye(2)
    fn = qe.aux_boundary if boundary else qe.aux_interior
    u, v = np.array([a1, a2]), np.array([b1, b2])
    A, B, C = (fn(dom, x, w, 0.0, pr, sig) for w in (u, v, u + v))
    D = fn(dom, x, 2 * u, 0.0, pr, sig)
    for f in ("r", "pi", "P"):
        assert np.allclose(getattr(C, f), getattr(A, f) + getattr(B, f), atol=1e-9)
        assert np.allclose(getattr(D, f), 2 * getattr(A, f), atol=1e-9)
    assert np.allclose(A.P, -np.swapaxes(A.P, -1, -2))


@given(st.floats(-0.9, 0.9), st.floats(-0.5, 0.5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2))
def test_pi_hat_relation_and_eta_tilde_cancellation(x1, x2, z1, z2, xt):
    dom = pc.ellipse_domain([1.0, 0.6])
    x = np.array([x1, x2])
    if dom.psi(x) <= 1e-3 or np.linalg.norm(dom.grad(x)) < 1e-6:
        return
    pr = qe.BarrierParams.make(0.25, 0.25, 4)
    sig = SQ2 * np.eye(2)
    for fn in (qe.aux_boundary, qe.aux_interior):
        a = fn(dom, x, np.array([z1, z2]), xt, pr, sig)
        assert np.allclose(a.pi_hat, -2 * xt * a.pi)
        # eta~ increment (pi^ + 2 xi~ pi) . dw vanishes identically
        assert np.allclose(a.pi_hat + 2 * xt * a.pi, 0, atol=1e-12)


def test_pproperty_identity(rng):
    for dom in (pc.ball_domain(2, scale=4.0), pc.ellipse_domain([1.0, 0.5])):
        pts = pc.ProblemSpec(pc.tp1(2).controls, pc.tp1(2).g, dom, 3.0, 2, 2).sample_interior(500, 2)
        xi = rng.normal(size=(500, 2))
        sig = SQ2 * np.eye(2)
        res = qe.pproperty_residual(dom, pts, xi, sig)
        bound = 1e-10 * (1 + np.linalg.norm(xi, axis=1)) * np.linalg.norm(sig)
        assert np.all(res <= bound)


def _zero_aux():
    return qe.AuxProcesses(0.0, 0.0, np.zeros(2), np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2)), None)


def test_step_quasi_zero_aux():
    f = pc.Field(np.diag([1.0, 2.0]), np.array([0.5, -1.0]), 0.3)
    ctl = pc.ControlPoint(SQ2 * np.eye(2), np.zeros(2), 0.0, f)
    x = np.array([0.2, 0.1])
    xi = np.array([1.0, 2.0])
    s = qe.QuasiState.start(xi)
    out = qe.step_quasi(s, _zero_aux(), ctl, x, 0.4, np.array([0.03, -0.02]), 0.01)
    assert np.allclose(out.xi, xi) and np.allclose(out.eta, 0)
    assert out.xi_tilde == 0 and out.eta_tilde == 0
    f_xi = f.grad(x) @ xi
    assert out.xi_d3 == pytest.approx(math.exp(-0.4) * f_xi * 0.01)


def test_step_quasi_drift_example():
    ctl = pc.ControlPoint(SQ2 * np.eye(2), np.array([1.0, 0.0]), 0.0, pc.const_field(2, 1.0))
    aux = _zero_aux()
    aux.r = 1.0
    out = qe.step_quasi(qe.QuasiState.start([1.0, 0.0]), aux, ctl, np.zeros(2), 0.0, np.zeros(2), 0.1)
    assert np.allclose(out.xi, [1.2, 0.0])


def test_step_quasi_keeps_eta_tilde_zero(rng):
    dom = pc.ball_domain(2, scale=4.0)
    pr = qe.BarrierParams.make(0.25, 0.25, 4)
    ctl = pc.tp1(2).controls[0]
    x = np.array([0.3, 0.4])
    s = qe.QuasiState.start([0.6, -0.8])
    for _ in range(50):
        a = qe.aux_interior(dom, x, s.xi, s.xi_tilde, pr, ctl.sigma)
        s = qe.step_quasi(s, a, ctl, x, 0.0, rng.normal(0, 0.03, 2), 1e-3)
        assert s.xi_d2 == s.xi_tilde and s.eta_d2 == s.eta_tilde
    assert abs(s.eta_tilde) <= 1e-12
    assert s.xi_tilde != 0


def test_update_regime():
    pr = qe.BarrierParams.make(0.25, 0.25, 4)
    a = qe.SwitchAutomaton()
    b = qe.update_regime(a, pr.lam ** 2 / 2, pr, 0.0)
    assert b.regime == qe.BOUNDARY and b.switch_times == [0.0]
    c = qe.update_regime(b, (pr.lam ** 2 + pr.lam) / 2, pr, 0.1)
    assert c is b
    d = qe.update_regime(c, pr.lam, pr, 0.2)
    assert d.regime == qe.INTERIOR and d.switch_times == [0.0, 0.2]


@given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=40))
def test_regime_mask_matches_automaton(psis):
    pr = qe.BarrierParams.make(0.25, 0.25, 4)
    auto = qe.SwitchAutomaton()
    mask = np.array([False])
    for k, p in enumerate(psis):
        auto = qe.update_regime(auto, p, pr, float(k))
        mask = qe.update_regime_mask(mask, np.array([p]), pr)
        assert bool(mask[0]) == (auto.regime == qe.BOUNDARY)
    assert auto.switch_times == sorted(set(auto.switch_times))


def _tangent_point(lam, level):
    # unit ball, scale 1: psi = level at (sqrt(1 - level), 0); tangent xi = e2
    return np.array([math.sqrt(1 - level), 0.0])


def test_barrier_values_on_level_sets():
    dom = pc.ball_domain(2)
    lam, th, k1 = 0.125, 1 / 6, 1.0
    pr = qe.BarrierParams.make(lam, th, k1)
    x = _tangent_point(lam, lam)
    e2 = np.array([0.0, 1.0])
    assert qe.barrier_B1(dom, x, e2, pr) == pytest.approx(lam * (0.75 + lam) * 35 / 32)
    assert qe.barrier_B1(dom, x, e2, pr) == pytest.approx(0.11963, abs=1e-5)
    assert qe.barrier_B1(dom, x, np.zeros(2), pr) == 0
    assert qe.barrier_B2(dom, x, np.zeros(2), pr) == 0
    xi = np.array([0.3, -0.7])
    q = (dom.grad(x) @ xi) ** 2 / lam
    assert qe.barrier_B1(dom, x, xi, pr) == pytest.approx(lam * (0.75 + lam) * (35 / 32 * xi @ xi + q))
    assert qe.barrier_B2(dom, x, xi, pr) == pytest.approx(lam ** (1 + th) * (k1 * xi @ xi + q))
    x2 = _tangent_point(lam, lam * lam)
    q2 = (dom.grad(x2) @ xi) ** 2 / lam ** 2
    b1 = lam ** 2 * (2 - lam / 4) * ((1 + (lam - lam ** 2 / 4) / 8) * xi @ xi + q2)
    assert qe.barrier_B1(dom, x2, xi, pr) == pytest.approx(b1)
    assert qe.barrier_B2(dom, x2, xi, pr) == pytest.approx(lam ** (2 - th) * (k1 * xi @ xi + q2))


def test_envelopes_by_region():
    dom = pc.ball_domain(2)
    pr = qe.BarrierParams.make(0.25, 0.25, 4)
    xi = np.array([0.6, 0.8])
    for psi, kind in ((pr.lam ** 2 / 2, "strip"), ((pr.lam + pr.lam ** 2) / 2, "overlap"), (0.6, "interior")):
        x = _tangent_point(pr.lam, psi)
        b1, b2 = qe.barrier_B1(dom, x, xi, pr), qe.barrier_B2(dom, x, xi, pr)
        up, lo = qe.barrier_envelopes(dom, x, xi, pr)
        if kind == "strip":
            assert up == pytest.approx(b1) and lo == pytest.approx(b1)
        elif kind == "overlap":
            assert up == pytest.approx(b1 + b2) and lo == pytest.approx(min(b1, b2))
        else:
            assert up == pytest.approx(b2) and lo == pytest.approx(b2)
    with pytest.raises(ValueError):
        qe.barrier_envelopes(dom, _tangent_point(pr.lam, pr.delta / 2), xi, pr)


def test_switching_check_rejects_large_lambda():
    rep = qe.switching_check(pc.ball_domain(2), qe.BarrierParams.make(0.125, 1 / 6, 1), 20, 0)
    assert not rep["pass"]
    # B1 - 4 B2 at a tangent point of {psi = lambda}: 0.11963 - 0.3536
    assert rep["min_b1_minus_4b2"] <= 0.11963 - 4 * 0.125 ** (7 / 6) + 1e-4
    with pytest.raises(ValueError):
        qe.switching_check(pc.ball_domain(2), qe.BarrierParams.make(0.125, 1 / 6, 1), 0)


def test_generator_drift_zero_xi(calibrated):
    prob, pr, _ = calibrated
    ctl = prob.controls[0]
    for regime, bar, x in ((qe.INTERIOR, "B2", np.array([0.3, 0.2])),):
        assert abs(qe.generator_drift(prob, ctl, prob.domain, x, np.zeros(2), 0.0, regime, pr, bar)) <= 1e-8
    with pytest.raises(ValueError):
        qe.generator_drift(prob, ctl, prob.domain, np.zeros(2), np.ones(2), 0.0, qe.INTERIOR, pr, "B1")


def test_generator_drift_matches_closed_form():
    # interior barrier, B2 = lam^(3 th) psi^(1-2th) (K1 |xi|^2 + psi_xi^2 / psi), checked against
    # an independent float finite-difference of the joint generator
    prob = pc.normalize_domain_scale(pc.tp1(2))
    pr = qe.BarrierParams.make(0.25, 0.25, 16)
    ctl = prob.controls[0]
    dom = prob.domain
    x, xi = np.array([0.2, -0.1]), np.array([0.6, 0.8])
    got = qe.generator_drift(prob, ctl, dom, x, xi, 0.0, qe.INTERIOR, pr, "B2")
    aux = qe.aux_interior(dom, x, xi, 0.0, pr, ctl.sigma)
    S = np.vstack([ctl.sigma, aux.r * ctl.sigma + aux.P @ ctl.sigma])
    mu = np.concatenate([ctl.b, 2 * aux.r * ctl.b - ctl.sigma @ aux.pi])
    z0 = np.concatenate([x, xi])

    def B(z):
        return qe.barrier_B2(dom, z[:2], z[2:], pr)

    h = 1e-4
    grad = np.array([(B(z0 + h * e) - B(z0 - h * e)) / (2 * h) for e in np.eye(4)])
    H = np.array([[(B(z0 + h * (e + f)) - B(z0 + h * (e - f)) - B(z0 - h * (e - f)) + B(z0 - h * (e + f))) / (4 * h * h)
                   for f in np.eye(4)] for e in np.eye(4)])
    ref = grad @ mu + 0.5 * np.sum(H * (S @ S.T))
    assert got == pytest.approx(ref, rel=1e-5)


@pytest.mark.parametrize("kappa", [1.0, 0.5])
def test_drift_nonpositive_at_calibrated_params(calibrated, kappa):
    prob, pr, _ = calibrated
    dom = prob.domain
    tol = 1e-8 * dom.scale
    strip = qe.drift_samples(dom, pr.delta * 1.0001, pr.lam ** 2, 25, 41)
    inner = qe.drift_samples(dom, pr.lam, qe.psi_max(dom) * 0.999, 25, 42)
    assert qe.drift_certificate(prob, pr, strip, "B1", kappa) <= tol
    assert qe.drift_certificate(prob, pr, inner, "B2", kappa) <= tol


def test_calibration_certificate(calibrated):
    prob, pr, cert = calibrated
    assert cert["switching_margins"][0] >= 0 and cert["switching_margins"][1] >= 0
    assert set(cert) >= {"lambda", "theta", "k1", "nu", "drift_max_strip", "drift_max_interior",
                         "switching_margins", "n_samples", "seed"}
    assert cert["nu"] == pytest.approx(qe.nu_of(pr.theta))


def test_calibration_errors():
    prob = pc.tp1(2)
    with pytest.raises(ValueError):
        qe.calibrate_lambda(pc.normalize_domain_scale(prob), n_samples=0)
    weak = prob.with_domain(prob.domain.rescaled(1 / 8))
    with pytest.raises(qe.CalibrationError):
        qe.calibrate_lambda(weak, n_samples=4)


def test_level_points_hit_level():
    dom = pc.ellipse_domain([1.0, 0.5], scale=2.0)
    pts = qe.sample_level_points(dom, [0.1, 0.01, 1e-6], 0)
    for p, lv in zip(pts, (0.1, 0.01, 1e-6)):
        assert float(dom.psi(p)) == pytest.approx(lv, rel=1e-12)


def test_coupled_run_stops_and_tracks(calibrated):
    prob, pr, _ = calibrated
    res = qe.run_coupled(prob, pr, [0.2, 0.0], [0.0, 1.0], 200, 5, 1e-3, qe.StopSpec(T=0.2, delta=0.1))
    assert np.all(res.t <= 0.2 + 1e-12)
    psi = prob.domain.psi(res.x)
    early = res.t < 0.2 - 1e-12
    assert early.any() and (~early).any()
    assert np.all(psi[early] <= 0.1)
    assert np.allclose(res.t[psi > 0.1], 0.2)
    assert np.all(np.abs(res.q.eta_tilde) <= 10 * 1e-3)
