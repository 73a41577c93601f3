import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clampid import contraction as ct
from clampid import kinetics as kin
from clampid import neuron as nr

HH_BOX = ct.StateBox((-77.0, 55.0), 3)


@pytest.fixture(scope="module")
def toy():
    """One slow, weakly coupled gate: small enough for a certifiable clamp."""
    k = kin.ChannelKinetics(kin.GateKinetics(kin.constant(2.0), kin.sigmoid(1.0, -40.0, 10.0), 1))
    model = nr.ConductanceModel(1.0, 0.3, -54.0, (nr.Channel(0.1, -77.0, k),))
    box = ct.StateBox((-80.0, -20.0), 1)
    points = ct.box_sampler(2000, 7)(box)
    metric, _ = ct.internal_contraction_rate(model)
    cert = ct.certify_closed_loop(model, 50.0, metric, points)
    return model, box, metric, cert


def test_metric_validation():
    with pytest.raises(ValueError):
        ct.Metric(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        ct.Metric(np.diag([1.0, -1.0]))
    m = ct.Metric.diagonal([4.0, 9.0])
    np.testing.assert_allclose(m.theta, np.diag([2.0, 3.0]))
    assert m.min_eigenvalue == 4.0 and m.condition_number == 2.25


def test_state_box():
    with pytest.raises(ValueError):
        ct.StateBox((10.0, -10.0), 2)
    corners = ct.StateBox((-1.0, 1.0), 2).corners()
    assert corners.shape == (8, 3)
    assert {tuple(c) for c in corners} == {(v, a, b) for v in (-1, 1) for a in (0, 1) for b in (0, 1)}


def test_hh_internal_rate(hh):
    metric, tau_max = ct.internal_contraction_rate(hh)
    assert tau_max == pytest.approx(8.58165149598674646, rel=1e-12)
    assert metric.lam == pytest.approx(1 / 8.6, rel=0.02)
    np.testing.assert_array_equal(metric.P, np.eye(3))


def test_constant_tau_rate():
    k = kin.ChannelKinetics(kin.GateKinetics(kin.constant(2.0), kin.constant(0.3), 1))
    metric, tau_max = ct.internal_contraction_rate([k])
    assert metric.lam == 0.5 and tau_max == 2.0


def test_cs_internal_rate():
    _, tau_max = ct.internal_contraction_rate(kin.cs_library())
    assert tau_max == pytest.approx(3.88446484234403099, rel=1e-12)


def test_gate_block_contracts_at_rate(hh):
    metric, _ = ct.internal_contraction_rate(hh)
    assert ct.gate_block_margin(hh, metric) <= -metric.lam + 1e-12


def test_jacobian_entries(hh):
    metric, _ = ct.internal_contraction_rate(hh)
    J0 = ct.jacobian(hh, 0.0, -20.0, np.zeros(3))
    assert -J0[0, 0] * hh.c == pytest.approx(0.3, rel=1e-14)
    J1 = ct.jacobian(hh, 0.0, -20.0, np.ones(3))
    assert -J1[0, 0] * hh.c == pytest.approx(156.3, rel=1e-14)
    F = ct.closed_loop_jacobian(hh, 50.0, -20.0, np.zeros(3), metric)
    assert F[0, 0] == pytest.approx(-50.3, rel=1e-14)


def test_jacobian_matches_finite_difference_of_vector_field(hh):
    v, w, gamma = -30.0, np.array([0.4, 0.5, 0.6]), 50.0

    def field(x):
        g = nr.internal_current(hh, x[0], x[1:])
        ts = 1.0
        gates = np.array([(xi(x[0]) - wi) / ti(x[0]) for xi, ti, wi in zip(hh.layout.x_infs, hh.layout.taus, x[1:])])
        return np.concatenate([[(-g - gamma * x[0]) / hh.c], gates]) * ts

    x0 = np.concatenate([[v], w])
    h = 1e-6
    num = np.column_stack([(field(x0 + h * e) - field(x0 - h * e)) / (2 * h) for e in np.eye(4)])
    np.testing.assert_allclose(ct.jacobian(hh, gamma, v, w), num, rtol=1e-6, atol=1e-6)


def test_example2_identity_metric_point(hh):
    metric, _ = ct.internal_contraction_rate(hh)
    report = ct.gain_bound(hh, metric, HH_BOX, points=np.array([[-77.0, 1, 1, 1]]))
    assert report.bound_necessary_sampled == pytest.approx(5.1e8, rel=0.05)
    assert report.bound_sufficient >= report.bound_necessary_sampled


def test_example2_diagonal_metric_search(hh):
    identity, _ = ct.internal_contraction_rate(hh)
    metric = ct.Metric.diagonal(1e6 * np.array([0.21, 3.80, 3.16]), identity.lam)
    report = ct.gain_bound(hh, metric, HH_BOX)
    assert report.sample_count == 100_000 + 16
    assert 1.35e3 <= report.bound_necessary_sampled <= 5.4e3
    assert report.bound_sufficient >= report.bound_necessary_sampled


def test_decoupled_model_has_zero_coupling():
    k = kin.ChannelKinetics(kin.GateKinetics(kin.constant(1.5), kin.constant(0.4), 2))
    model = nr.ConductanceModel(1.0, 0.3, -60.0, (nr.Channel(0.0, 10.0, k),))
    metric, _ = ct.internal_contraction_rate(model)
    report = ct.gain_bound(model, metric, ct.StateBox((-100.0, 50.0), 1), sampler=ct.box_sampler(500))
    assert report.sigma_max_q == 0.0
    assert report.bound_sufficient == 0.0
    assert report.bound_necessary_sampled == pytest.approx(-0.3)


@given(st.floats(-77, 55), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_sufficient_dominates_necessary(hh, v, a, b, c):
    metric, _ = ct.internal_contraction_rate(hh)
    report = ct.gain_bound(hh, metric, HH_BOX, points=np.array([[v, a, b, c]]))
    assert report.bound_sufficient >= report.bound_necessary_sampled


@given(st.integers(0, 2 ** 31), st.floats(0, 40), st.floats(0, 40))
def test_enlarging_candidate_set_never_lowers_bound(hh, seed, lo_ext, hi_ext):
    identity, _ = ct.internal_contraction_rate(hh)
    metric = ct.Metric.diagonal(1e6 * np.array([0.21, 3.80, 3.16]), identity.lam)
    small = ct.StateBox((-60.0, 20.0), 3)
    big = ct.StateBox((-60.0 - lo_ext, 20.0 + hi_ext), 3)
    pts_small = ct.box_sampler(300, seed)(small)
    pts_big = np.vstack([pts_small, ct.box_sampler(300, seed)(big)])
    a = ct.gain_bound(hh, metric, small, points=pts_small).bound_necessary_sampled
    b = ct.gain_bound(hh, metric, big, points=pts_big).bound_necessary_sampled
    assert b >= a


def test_gain_bound_serialization(hh):
    metric, _ = ct.internal_contraction_rate(hh)
    report = ct.gain_bound(hh, metric, HH_BOX, points=np.array([[-77.0, 1, 1, 1]]))
    rows = dict(report.rows())
    assert rows["sample_count"] == 1 and rows["argmax_state_0"] == -77.0
    assert "sufficient" in report.to_text()


def test_euler_rate_example():
    out = ct.euler_rate_bound(0.1, np.eye(3), 1.0, 0.005)
    assert out.accepted
    assert out.alpha_sq == pytest.approx(0.999025, abs=1e-15)
    assert out.alpha == pytest.approx(0.99951238, rel=1e-8)


def test_euler_rate_small_step_limit():
    alphas = [ct.euler_rate_bound(0.1, np.eye(2), 3.0, ts).alpha for ts in (1e-2, 1e-3, 1e-4, 1e-6)]
    assert all(a < 1 for a in alphas)
    assert all(b > a for a, b in zip(alphas, alphas[1:]))
    assert alphas[-1] == pytest.approx(1.0, abs=1e-6)


def test_euler_rate_rejection_threshold():
    P = np.diag([1.0, 4.0])
    out = ct.euler_rate_bound(0.2, P, 2.0, 0.1)
    assert not out.accepted
    assert out.max_ts == pytest.approx(2 * 0.2 * 1.0 / (4.0 * 4.0))
    assert ct.euler_rate_bound(0.2, P, 2.0, 0.99 * out.max_ts).accepted
    assert not ct.euler_rate_bound(0.2, P, 2.0, 1.01 * out.max_ts).accepted
    with pytest.raises(ValueError):
        ct.euler_rate_bound(0.0, P, 1.0, 0.1)


@given(st.floats(1e-3, 10), st.floats(1, 100), st.floats(0.01, 100), st.floats(1e-6, 1.0), st.floats(0.01, 10))
def test_euler_rate_formula(lam, kappa, sigma, frac, scale):
    P = scale * np.diag([1.0, kappa])
    max_ts = 2 * lam / (kappa * sigma ** 2)
    ts = frac * max_ts
    out = ct.euler_rate_bound(lam, P, sigma, ts)
    expected = 1 - 2 * ts * lam + ts ** 2 * kappa * sigma ** 2
    assert out.alpha_sq == pytest.approx(expected, rel=1e-12, abs=1e-15)
    if frac < 1:
        assert out.accepted and out.alpha < 1


def test_probe_fig6(hh):
    report = ct.step_response_probe(hh, 50.0, 0.005, [-80, -60, -40, -20, 0, 20], -45.0, 10.0, 60.0, settle_time=30.0)
    assert report.contracting
    assert report.max_spread_after_settle < 0.1
    assert report.decay_rate > 0


def test_probe_single_baseline(hh):
    report = ct.step_response_probe(hh, 50.0, 0.005, [-60], -45.0, 10.0, 20.0, settle_time=0.0)
    np.testing.assert_array_equal(report.spread, 0.0)
    assert report.contracting


def test_probe_detects_open_loop_spiking(hh):
    report = ct.step_response_probe(
        hh, 0.0, 0.005, [-80, -60, -40, -20, 0, 20], -45.0, 10.0, 200.0, noise=10.0, settle_time=100.0
    )
    assert not report.contracting
    assert report.max_spread_after_settle >= 1.0
    assert "NOT contracting" in report.to_text()


def test_toy_certificate(toy):
    model, box, metric, cert = toy
    assert cert.rate > 0
    report = ct.gain_bound(model, metric, box, points=ct.box_sampler(2000, 7)(box))
    assert 50.0 > report.bound_sufficient


def test_empirical_rate_respects_certificate(toy):
    model, _, _, cert = toy
    bound = ct.euler_rate_bound(cert.rate, cert.P, cert.sigma_bar, 1.0)
    ts = 0.5 * bound.max_ts
    rate = ct.euler_rate_bound(cert.rate, cert.P, cert.sigma_bar, ts)
    assert rate.accepted
    certified = -math.log(rate.alpha) / ts
    probe = ct.step_response_probe(model, 50.0, ts, [-70, -50, -30], -50.0, 1.0, 15.0, settle_time=10.0)
    # the certified rate is a lower bound on the observed one (20% slack)
    assert probe.decay_rate >= 0.8 * certified
    per_step = math.exp(-probe.decay_rate * ts)
    assert per_step < 1
