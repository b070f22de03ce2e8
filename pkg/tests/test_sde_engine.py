import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from bellquasi import problem_core as pc
from bellquasi import sde_engine as se
from bellquasi.quasi_engine import AuxProcesses
from bellquasi.rng import NoiseStream


def _problem(d=2, c=0.0, f=1.0, g=0.0, b=None):
    ctl = pc.ControlPoint(math.sqrt(2) * np.eye(d), np.zeros(d) if b is None else np.asarray(b, float), c,
                          pc.const_field(d, f))
    return pc.ProblemSpec((ctl,), pc.const_field(d, g), pc.ball_domain(d), max(2 * math.sqrt(d), c, 1.0), d, d)


def _zero_aux(n, d):
    return AuxProcesses(np.zeros(n), np.zeros(n), np.zeros((n, d)), np.zeros((n, d)),
                        np.zeros((n, d, d)), np.zeros((n, d, d)), None)


def test_step_base_examples():
    ctl = pc.ControlPoint(np.zeros((2, 2)), np.array([1.0, 0.0]), 0.0, pc.const_field(2, 0.0))
    assert np.allclose(se.step_base([0.0, 0.0], ctl, [0.3, 0.4], 0.5), [0.5, 0.0])
    tp1 = pc.tp1(2).controls[0]
    assert np.array_equal(se.step_base([0.2, 0.1], tp1, [0.0, 0.0], 0.1), [0.2, 0.1])
    out = se.step_base([0.5, 0.0], tp1, [0.1, -0.2], 0.01)
    assert np.allclose(out, [0.5 + 0.1 * math.sqrt(2), -0.2 * math.sqrt(2)])
    with pytest.raises(ValueError):
        se.step_base([0.0, 0.0, 0.0], tp1, [0.1, 0.1], 0.01)


def test_time_change_examples():
    assert se.time_change_factor(123.0, 4.0, 0.0) == 1.0
    assert se.time_change_factor(1.0, 0.0, 0.1) == pytest.approx(1 + math.atan(0.2 * math.pi) / math.pi)
    assert se.time_change_factor(1.0, 0.0, 0.1) == pytest.approx(1.17857, abs=1e-5)
    assert se.time_change_factor(1.0, 0.0, 0.1, "second") == se.time_change_factor(1.0, 0.0, 0.1)
    assert se.time_change_factor(1e300, 0.0, 0.5) <= 1.5


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(0, 1), st.sampled_from(["first", "second"]))
def test_time_change_range(r, rh, eps, order):
    th = se.time_change_factor(r, rh, eps, order)
    assert 0.5 <= th <= 1.5


def test_skew_expm_matches_scipy_and_is_orthogonal():
    P = np.array([[0.0, -2.0], [2.0, 0.0]])
    R = se.skew_expm(P, 0.1)
    assert np.allclose(R, expm(0.1 * P))
    assert np.linalg.norm(R @ [1.0, 0.0]) == pytest.approx(1.0)
    P3 = np.array([[0, 1, -2], [-1, 0, 0.5], [2, -0.5, 0]], dtype=float)
    R3 = se.skew_expm(P3, 0.3)
    assert np.allclose(R3 @ R3.T, np.eye(3))
    with pytest.raises(ValueError):
        se.skew_expm(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.1)


def test_perturbed_steps_reduce_to_base_at_eps_zero(rng):
    prob = pc.tp1(2)
    ctl = prob.controls[0]
    n = 16
    y0 = rng.uniform(-0.5, 0.5, (n, 2))
    dw = rng.normal(0, 0.03, (n, 2))
    aux = AuxProcesses(rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 2)), rng.normal(size=(n, 2)),
                       np.zeros((n, 2, 2)), np.zeros((n, 2, 2)), None)
    P = rng.normal(size=n)
    aux.P[:, 0, 1], aux.P[:, 1, 0] = -P, P
    st0 = se.PerturbedState.start(y0)
    for step in (se.step_perturbed_first, se.step_perturbed_second):
        out = step(st0, aux, ctl, 0.0, dw, 1e-3)
        assert np.array_equal(out.y, se.step_base(y0, ctl, dw, 1e-3))
        assert np.all(out.logp == 0)
        assert np.allclose(out.q, 1e-3)


def test_zero_aux_is_plain_translation(rng):
    ctl = pc.tp1(2).controls[0]
    n = 8
    y0 = rng.uniform(-0.5, 0.5, (n, 2))
    dw = rng.normal(0, 0.03, (n, 2))
    out = se.step_perturbed_first(se.PerturbedState.start(y0), _zero_aux(n, 2), ctl, 0.2, dw, 1e-3)
    assert np.allclose(out.y, se.step_base(y0, ctl, dw, 1e-3))
    assert np.all(out.logp == 0)


def test_second_order_theta_coincides_when_r_hat_zero():
    aux = _zero_aux(1, 2)
    aux.r[:] = 1.0
    th1 = se.time_change_factor(aux.r, aux.r_hat, 0.1, "first")
    th2 = se.time_change_factor(aux.r, aux.r_hat, 0.1, "second")
    assert th1 == pytest.approx(th2) and th1[0] == pytest.approx(1.17857, abs=1e-5)


def test_girsanov_increment():
    ctl = pc.tp1(2).controls[0]
    aux = _zero_aux(1, 2)
    aux.pi[:] = [1.0, -2.0]
    dw = np.array([[0.1, 0.05]])
    out = se.step_perturbed_first(se.PerturbedState.start(np.zeros((1, 2))), aux, ctl, 0.1, dw, 0.01)
    shift = np.array([0.1, -0.2])
    assert out.logp[0] == pytest.approx(shift @ dw[0] - 0.5 * shift @ shift * 0.01)


def test_detect_exit_examples():
    dom = pc.ball_domain(2)
    assert se.detect_exit(dom, [0.0, 0.0], [0.5, 0.0]) is None
    pt = se.detect_exit(dom, [0.9, 0.0], [1.1, 0.0])
    assert pt == pytest.approx([1.0, 0.0], abs=1e-9)
    pt = se.detect_exit(dom, [0.9, 0.0], [1.1, 0.0], level=0.01)
    assert np.linalg.norm(pt) == pytest.approx(math.sqrt(0.99), abs=1e-9)
    with pytest.raises(ValueError):
        se.detect_exit(dom, [1.2, 0.0], [1.3, 0.0])


def test_zero_payoffs_give_zero():
    prob = _problem(f=0.0, g=0.0)
    res = se.simulate_batch(prob, se.SimConfig(dt=1e-3), [0.2, 0.0], 200, 1)
    assert np.all(res.payoff == 0)


def test_large_discount_suppresses_terminal_payoff():
    prob = _problem(c=1e3, f=0.0, g=1.0)
    res = se.simulate_batch(prob, se.SimConfig(dt=1e-4), [0.0, 0.0], 200, 2)
    sel = res.exit_time > 0.01
    assert sel.any()
    assert np.all(res.payoff[sel] < 1e-3)


def test_path_record_invariants():
    prob = _problem(c=0.5)
    cfg = se.SimConfig(dt=1e-3)
    res = se.simulate_batch(prob, cfg, [0.3, -0.2], 500, 3)
    ok = ~res.truncated
    assert np.all(prob.domain.psi(res.exit_point[ok]) <= 1e-9)
    assert np.all(res.discount >= 0)
    assert np.all(res.discount <= 0.5 * res.exit_time + 1e-12)


def test_exit_time_tp1_one_dim():
    prob = pc.tp1(1)
    res = se.simulate_batch(prob, se.SimConfig(dt=1e-3), [0.0], 100_000, 5)
    se_ = res.exit_time.std(ddof=1) / math.sqrt(res.exit_time.size)
    assert abs(res.exit_time.mean() - 0.5) <= 3 * se_ + 0.01


def test_replay_independent_of_threads_and_blocking(monkeypatch):
    prob = pc.tp1(2)
    a = se.simulate_batch(prob, se.SimConfig(dt=1e-3), [0.1, 0.1], 300, 9)
    monkeypatch.setattr(se, "CHUNK", 64)
    b = se.simulate_batch(prob, se.SimConfig(dt=1e-3, threads=3), [0.1, 0.1], 300, 9)
    assert np.array_equal(a.payoff, b.payoff) and np.array_equal(a.exit_point, b.exit_point)
    tail = se.simulate_batch(prob, se.SimConfig(dt=1e-3), [0.1, 0.1], 100, 9, first_index=200)
    assert np.array_equal(tail.exit_time, a.exit_time[200:])
    one = se.simulate_path(prob, se.SimConfig(dt=1e-3), [0.1, 0.1], NoiseStream(9, 17))
    assert one.exit_time == a.exit_time[17] and one.payoff == a.payoff[17]


def test_regularized_at_zero_matches_plain():
    prob = pc.tp1(2)
    cfg = se.SimConfig(dt=1e-3)
    ns = NoiseStream(4, 2)
    a = se.simulate_path(prob, cfg, [0.0, 0.3], ns)
    b = se.simulate_regularized(prob, 0.0, cfg, [0.0, 0.3], ns)
    assert a.exit_time == b.exit_time and np.array_equal(a.exit_point, b.exit_point)
    with pytest.raises(ValueError):
        se.simulate_regularized(prob, -0.1, cfg, [0.0, 0.3], ns)


def test_start_outside_rejected():
    with pytest.raises(ValueError):
        se.simulate_path(pc.tp1(2), se.SimConfig(), [1.5, 0.0], NoiseStream(0))


def test_config_validation():
    with pytest.raises(ValueError):
        se.SimConfig(dt=2.0, t_max=1.0)
    with pytest.raises(ValueError):
        se.SimConfig(boundary_bisection_iters=-1)


def test_trace_csv(tmp_path):
    prob = pc.tp1(2)
    rec = se.simulate_path(prob, se.SimConfig(dt=1e-2), [0.0, 0.0], NoiseStream(1), trace=True)
    p = tmp_path / "t.csv"
    se.write_trace_csv(p, rec, 2)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,x1,x2,psi,phi,logp"
    assert len(lines) == len(rec.trace) + 1
