import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from clampid import kinetics as kin
from clampid import neuron as nr
from clampid.neuron import ClosedLoopConfig, simulate_closed_loop

TS = 0.005


def hh_current_by_hand(v, m1, h1, m2):
    return 0.3 * (v + 54.4) + 120 * m1 ** 3 * h1 * (v - 55) + 36 * m2 ** 4 * (v + 77)


def test_internal_current_at_leak_reversal(hh):
    assert nr.internal_current(hh, -54.4, np.zeros(3)) == pytest.approx(0.0, abs=1e-12)


def test_internal_current_all_gates_open(hh):
    assert nr.internal_current(hh, 0.0, np.ones(3)) == pytest.approx(-3811.68, rel=1e-14)


@given(st.floats(-120, 120), hnp.arrays(float, 3, elements=st.floats(0, 1)))
def test_internal_current_matches_hand_formula(hh, v, w):
    expected = hh_current_by_hand(v, *w)
    assert nr.internal_current(hh, v, w) == pytest.approx(expected, rel=1e-12, abs=1e-9)


@given(st.floats(0.1, 10), st.floats(-120, 120), hnp.arrays(float, 3, elements=st.floats(0, 1)))
def test_internal_current_linear_in_conductances(hh, s, v, w):
    scaled = nr.ConductanceModel(
        c=hh.c,
        leak_g=s * hh.leak_g,
        leak_nu=hh.leak_nu,
        channels=tuple(nr.Channel(s * ch.g_max, ch.nu, ch.kinetics, ch.key) for ch in hh.channels),
    )
    base = nr.internal_current(hh, v, w)
    assert nr.internal_current(scaled, v, w) == pytest.approx(s * base, rel=1e-12, abs=1e-9)


def test_theta_of_hh(hh):
    np.testing.assert_allclose(
        hh.theta(), [0.3 * 54.4, 120 * -55, 36 * 77, 0.3, 120, 36, -1], rtol=1e-15
    )


def test_model_validation():
    k = kin.channel("hh.k")
    with pytest.raises(nr.ConfigurationError):
        nr.ConductanceModel(c=0, leak_g=0.3, leak_nu=0, channels=(nr.Channel(1, 0, k),))
    with pytest.raises(nr.ConfigurationError):
        nr.ConductanceModel(c=1, leak_g=0, leak_nu=0, channels=(nr.Channel(1, 0, k),))
    with pytest.raises(nr.ConfigurationError):
        nr.ConductanceModel(c=1, leak_g=0.3, leak_nu=0, channels=(nr.Channel(-1, 0, k),))


def test_gate_order(hh):
    lay = hh.layout
    assert list(lay.channel_of) == [0, 0, 1]
    assert list(lay.exponent) == [3, 1, 4]


def test_gate_step_fixed_point(hh):
    w = hh.steady_gates(-30.0)
    np.testing.assert_allclose(nr.gate_step(hh.kinetics, w, -30.0, TS), w, rtol=1e-15)


def test_gate_step_at_time_constant_lands_on_steady_state():
    gate = kin.channel("hh.k").activation
    v = -20.0
    ts = gate.tau(v)
    out = nr.gate_step([kin.channel("hh.k")], np.array([0.9]), v, ts)
    assert out[0] == gate.x_inf(v)


def test_gates_relax_to_steady_state(hh):
    # h_inf and n_inf at -65 mV to 18 digits
    expected = np.array([0.052932485257249575, 0.59612075350846024, 0.31767691406069739])
    np.testing.assert_allclose(hh.steady_gates(-65.0), expected, rtol=1e-13)
    steps = int(60 / TS)
    w = nr.drive_gates(hh.layout, np.full(steps, -65.0), np.zeros(3), TS)
    # at fixed v each gate error shrinks by (1 - ts/tau) per step
    taus = np.array([t(-65.0) for t in hh.layout.taus])
    predicted = (1 - TS / taus) ** (steps - 1) * (0 - expected)
    np.testing.assert_allclose(w[-1] - expected, predicted, rtol=1e-8, atol=1e-15)
    # tau_h(-65) is about 8.5 ms, so 1e-6 needs roughly 115 ms
    w = nr.drive_gates(hh.layout, np.full(int(120 / TS), -65.0), np.zeros(3), TS)
    assert np.max(np.abs(w[-1] - expected)) < 1e-6


def test_config_rejects_large_step(hh):
    cfg = ClosedLoopConfig(gamma=50, ts=0.05, steps=10)
    with pytest.raises(nr.ConfigurationError):
        cfg.validate(hh)
    with pytest.raises(nr.ConfigurationError):
        ClosedLoopConfig(gamma=-1, ts=TS, steps=10).validate(hh)
    with pytest.raises(nr.ConfigurationError):
        ClosedLoopConfig(gamma=1, ts=TS, steps=10, w0=np.array([0.5, 1.2, 0.1])).validate(hh)


def test_one_step_by_hand(hh):
    w0 = np.array([0.2, 0.5, 0.4])
    cfg = ClosedLoopConfig(gamma=50, ts=TS, steps=1, v0=-30.0, w0=w0)
    traj = simulate_closed_loop(hh, cfg, [-45.0], [1.5])
    g = hh_current_by_hand(-30.0, *w0)
    assert traj.v[1] == pytest.approx(-30.0 + TS * (-g + 50 * (-45 + 30) + 1.5), rel=1e-14)
    y0 = g - 50 * (-45 + 30) - 1.5
    assert traj.y[0] == pytest.approx(y0, rel=1e-10)


def test_spiking_open_loop(hh):
    cfg = ClosedLoopConfig(gamma=0, ts=TS, steps=int(100 / TS))
    traj = simulate_closed_loop(hh, cfg, 0.0, 10.0)
    assert nr.spike_count(traj.v) >= 5


def test_clamp_forgets_initial_voltage(hh):
    n = int(40 / TS)
    finals = []
    for v0 in (-80, -60, -40, -20, 0, 20):
        traj = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n, v0=v0), -45.0, 0.0)
        finals.append(traj.v[int(20 / TS):])
    finals = np.array(finals)
    assert np.max(finals.max(axis=0) - finals.min(axis=0)) < 0.1


def test_divergence_detected(hh):
    cfg = ClosedLoopConfig(gamma=1e5, ts=TS, steps=1000)
    with pytest.raises(nr.SimulationDiverged):
        simulate_closed_loop(hh, cfg, -45.0, 0.0)


def test_short_inputs_rejected(hh):
    with pytest.raises(nr.ConfigurationError):
        simulate_closed_loop(hh, ClosedLoopConfig(50, TS, 10), np.zeros(5), 0.0)


def test_signals_and_output_identity(hh, rng):
    n = 20000
    r = -45 + 40 * np.sin(np.arange(n) * 0.002)
    e = rng.normal(0, 2.5, n)
    traj = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n), r, e)
    np.testing.assert_array_equal(traj.u1, 50 * (r - traj.v[:-1]))
    np.testing.assert_array_equal(traj.u2, traj.v[:-1])
    np.testing.assert_array_equal(traj.y, nr.forward_difference_output(traj))
    g = np.array([nr.internal_current(hh, traj.v[k], traj.w[k]) for k in range(n)])
    rebuilt = (g - traj.u1 - e) / hh.c
    assert np.max(np.abs(rebuilt - traj.y)) <= 1e-10 * np.max(np.abs(traj.y))


def test_constant_voltage_gives_zero_output():
    traj = nr.Trajectory(ts=TS, gamma=1.0, v=np.full(5, -40.0), w=np.zeros((5, 1)), r=np.zeros(4), e=np.zeros(4))
    np.testing.assert_array_equal(nr.forward_difference_output(traj), 0.0)


def test_csv_round_trip(hh, tmp_path, rng):
    n = 300
    traj = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n), rng.normal(-45, 10, n), rng.normal(0, 1, n))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "k,t,v,r,e,u1,u2,y,w_0,w_1,w_2"
    back = nr.Trajectory.from_csv(path)
    assert back.gamma == pytest.approx(50, rel=1e-12)
    np.testing.assert_array_equal(back.v, traj.v)
    np.testing.assert_array_equal(back.w, traj.w)
    np.testing.assert_array_equal(back.r, traj.r)
    np.testing.assert_array_equal(back.e, traj.e)
    np.testing.assert_array_equal(back.y, traj.y)


def test_segment(hh):
    traj = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, 100), -45.0, 0.0)
    seg = traj.segment(10, 30)
    assert len(seg) == 20 and seg.v.size == 21
    np.testing.assert_array_equal(seg.y, traj.y[10:30])


@pytest.mark.parametrize("name", ["hh", "cs-a", "cs-b", "cs-c"])
@given(data=st.data())
def test_gates_stay_in_unit_box(name, data):
    model = nr.builtin_model(name)
    v_range = kin.V_RANGE if name == "hh" else (-100.0, 20.0)
    tau_min, _ = model.tau_bounds(v_range)
    ts = data.draw(st.floats(0.05 * tau_min, tau_min))
    v = data.draw(hnp.arrays(float, 200, elements=st.floats(*v_range)))
    w0 = data.draw(hnp.arrays(float, model.n_gates, elements=st.floats(0, 1)))
    w = nr.drive_gates(model.layout, v, w0, ts)
    assert np.all((w >= 0) & (w <= 1))


def test_voltage_stays_bounded_long_run(hh, rng):
    n = 1_000_000
    r = -45 + np.clip(rng.normal(0, 100, n), -100, 100)
    e = np.clip(rng.normal(0, 2.5, n), -20, 20)
    traj = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n), r, e)
    # the clamp cannot push v beyond the reference range by more than the
    # internal current allows
    assert traj.v.min() > -160 and traj.v.max() < 70
    assert np.all((traj.w >= 0) & (traj.w <= 1))


def test_exponential_forgetting(hh, rng):
    n = int(30 / TS)
    r = -45 + np.clip(rng.normal(0, 30, n), -30, 30)
    e = rng.normal(0, 1, n)
    a = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n, v0=-70.0), r, e)
    b = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n, v0=-10.0, w0=np.array([0.9, 0.1, 0.8])), r, e)
    diff = np.hypot(a.v - b.v, np.linalg.norm(a.w - b.w, axis=1))
    k = np.arange(n + 1)
    window = (k > int(2 / TS)) & (diff > 1e-12)
    slope = np.polyfit(k[window], np.log(diff[window]), 1)[0]
    assert np.exp(slope) < 1
    # per-millisecond envelope is monotone after the transient, up to 5%
    per_ms = int(1 / TS)
    env = diff[int(2 / TS):int(2 / TS) + 28 * per_ms].reshape(28, per_ms).max(axis=1)
    assert np.all(env[1:] <= env[:-1] * 1.05)


def test_entrainment_by_periodic_reference(hh):
    period = int(20 / TS)
    n = 12 * period
    k = np.arange(n)
    r = -50 + 10 * np.sin(2 * np.pi * k / period)
    traj = simulate_closed_loop(hh, ClosedLoopConfig(50, TS, n), r, 0.0)
    assert nr.steady_state_periodic_deviation(traj.v[:-1], period, cycles=3) <= 1e-6


def test_builtin_catalog():
    for name, (g3, g4) in {"a": (0, 0), "b": (90, 0), "c": (0, 0.4)}.items():
        m = nr.connor_stevens(name)
        assert m.c == 1.0 and m.leak_g == 0.3 and m.leak_nu == -17
        assert [ch.g_max for ch in m.channels] == [120, 20, g3, g4]
        assert [ch.nu for ch in m.channels] == [55, -75, -75, 120]
    with pytest.raises(KeyError):
        nr.builtin_model("cs-d")
