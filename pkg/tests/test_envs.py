import io

import numpy as np
import pytest

from safeproj.autodiff import ContractError
from safeproj.envs.feeder import (
    FeederEnv,
    PowerFlowSolver,
    RadialFeeder,
    feeder_step,
    make_feeder,
    solve_powerflow,
    two_bus_feeder,
)
from safeproj.envs.thermal import SimulationError, ThermalZone, ZoneParams, comfort_bounds
from safeproj.envs.traces import (
    SolarShape,
    TraceError,
    TraceSet,
    occupancy_schedule,
    synth_building_traces,
    synth_feeder_traces,
)


def flat_trace(days=1, t_out=0.0, solar=0.0, occ=0.0, cadence=300):
    n = days * 86400 // cadence
    return TraceSet("2017-01-02T00:00:00", cadence,
                    {"t_out": np.full(n, t_out), "solar": np.full(n, solar), "occ": np.full(n, occ)})


# ------------------------------------------------------------------ traces

def test_traces_deterministic():
    a = synth_building_traces(3, 2)
    b = synth_building_traces(3, 2)
    for k in a.names:
        np.testing.assert_array_equal(a[k], b[k])
    c = synth_building_traces(4, 2)
    assert not np.array_equal(a["t_out"], c["t_out"])


def test_irradiance_nonnegative_and_dark_at_night():
    f = make_feeder(0)
    tr = synth_feeder_traces(1, 2, f.n_bus, f.pv_buses, cadence_s=60)
    hours = (np.arange(len(tr)) * 60 / 3600.0) % 24
    night = (hours < SolarShape().sunrise) | (hours > SolarShape().sunset)
    for j in f.pv_buses:
        irr = tr[f"irr_{j}"]
        assert np.all(irr >= 0)
        assert np.all(irr[night] == 0)


def test_daily_peak_within_bounds():
    shape = SolarShape()
    tr = synth_feeder_traces(2, 30, 4, [3], cadence_s=60, solar=shape)
    lo, hi = shape.daily_peak_bounds
    peaks = tr["irr_3"].reshape(30, -1).max(axis=1)
    # local variation is +-3 %-level smooth noise around the shared pattern
    assert np.all(peaks <= hi)
    assert np.all(peaks >= 0.9 * lo)


def test_cadence_arithmetic():
    tr = synth_feeder_traces(7, 1, 3, [2], cadence_s=1)
    assert len(tr) == 86400


def test_csv_roundtrip_and_comments():
    tr = synth_building_traces(0, 1)
    buf = io.StringIO()
    tr.to_csv(buf, comments=["seed=0"], fmt="%.17g")
    text = buf.getvalue()
    assert text.startswith("# seed=0\ntimestamp,t_out,solar,occ\n")
    back = TraceSet.from_csv(io.StringIO(text))
    assert back.cadence_s == 300 and back.start == tr.start
    for k in tr.names:
        np.testing.assert_array_equal(back[k], tr[k])


def test_csv_rejects_gaps():
    text = "timestamp,a\n2017-01-01T00:00:00,1\n2017-01-01T00:00:01,2\n2017-01-01T00:00:03,3\n"
    with pytest.raises(TraceError):
        TraceSet.from_csv(io.StringIO(text))
    with pytest.raises(TraceError):
        TraceSet.from_csv(io.StringIO("a,b\n1,2\n"))


def test_forecast_modes():
    tr = synth_building_traces(0, 1)
    f = tr.forecast(["t_out"], 5, 4)
    np.testing.assert_array_equal(f[:, 0], tr["t_out"][5:9])
    p = tr.forecast(["t_out"], 5, 4, mode="persistence")
    assert np.all(p == tr["t_out"][5])
    end = tr.forecast(["t_out"], len(tr) - 1, 3)
    assert np.all(end == tr["t_out"][-1])


def test_occupancy_weekdays():
    stamps = np.array(["2017-01-02T09:00:00", "2017-01-07T09:00:00", "2017-01-02T19:00:00"],
                      dtype="datetime64[s]")  # Monday, Saturday, Monday evening
    np.testing.assert_array_equal(occupancy_schedule(stamps), [1.0, 0.0, 0.0])


# ----------------------------------------------------------------- thermal

def test_decay_toward_umin_equilibrium():
    p = ZoneParams(g_max=0.0, c_sol=0.0, c_occ=0.0)
    zone = ThermalZone(flat_trace(3), p, x0=30.0)
    eq = (p.a_out * 0.0 + p.a_u * p.u_min) / (p.a_out + p.a_u)
    xs = [zone.step(p.u_min)[0] for _ in range(zone.n_steps)]
    assert np.all(np.diff(xs) <= 0) and xs[1] < xs[0]
    assert abs(xs[-1] - eq) < 0.05


def test_linear_plant_matches_surrogate():
    tr = synth_building_traces(1, 2)
    zone = ThermalZone(tr, ZoneParams(g_max=0.0), x0=21.0)
    m = zone.exact_surrogate()
    rng = np.random.default_rng(0)
    for k in range(100):
        x = zone.x
        u = rng.uniform(20, 65)
        pred = m.step([x], [u], zone.disturbance(k))[0]
        x_next, cost = zone.step(u)
        assert abs(pred - x_next) <= 1e-12
        assert cost == u


def test_periodic_steady_state():
    n_day = 288
    day = np.arange(n_day)
    t_out = 5 * np.sin(2 * np.pi * day / n_day)
    solar = np.clip(400 * np.sin(2 * np.pi * (day - 72) / n_day), 0, None)
    days = 20
    tr = TraceSet("2017-01-02T00:00:00", 300, {"t_out": np.tile(t_out, days),
                                               "solar": np.tile(solar, days),
                                               "occ": np.zeros(n_day * days)})
    zone = ThermalZone(tr, ZoneParams(), x0=10.0)
    xs = np.array([zone.step(40.0)[0] for _ in range(zone.n_steps)])
    per = n_day // 3
    np.testing.assert_allclose(xs[-per:], xs[-2 * per:-per], atol=1e-6)


def test_thermal_contracts():
    zone = ThermalZone(flat_trace(1), ZoneParams(), x0=20.0)
    with pytest.raises(ContractError):
        zone.step(80.0)
    cold = ThermalZone(flat_trace(1, t_out=-1e4), ZoneParams(), x0=1.0)
    with pytest.raises(SimulationError):
        cold.step(20.0)


def test_comfort_bounds():
    b = comfort_bounds([1, 0])
    np.testing.assert_array_equal(b, [[21.9, 25.5], [18.0, 28.0]])


# --------------------------------------------------------------- power flow

def two_bus_closed_form(r, x, p, q):
    # |V|^4 - (2 (r p + x q) + 1) |V|^2 + |z|^2 (p^2 + q^2) = 0, high-voltage root
    b = -(2 * (r * p + x * q) + 1.0)
    c = (r * r + x * x) * (p * p + q * q)
    return np.sqrt((-b + np.sqrt(b * b - 4 * c)) / 2)


def test_zero_injection_flat_profile():
    f = make_feeder(0)
    v = solve_powerflow(f, np.zeros(f.n_bus), np.zeros(f.n_bus))
    np.testing.assert_allclose(v, 1.0, atol=1e-12)


@pytest.mark.parametrize("p,q", [(-0.5, -0.2), (0.3, 0.1), (0.8, -0.4)])
def test_two_bus_matches_closed_form(p, q):
    r, x = 0.05, 0.03
    v = solve_powerflow(two_bus_feeder(r, x), [p], [q])
    np.testing.assert_allclose(v[0], two_bus_closed_form(r, x, p, q), atol=1e-10)


def test_pv_export_raises_voltage_along_path():
    N = 8
    f = RadialFeeder(np.arange(N), np.full(N, 0.02), np.full(N, 0.01), np.array([N - 1]))
    p = np.zeros(N)
    p[-1] = 0.3
    v = solve_powerflow(f, p, np.zeros(N))
    assert np.all(np.diff(np.concatenate([[1.0], v])) > 0)


def test_warm_start_same_answer():
    f = make_feeder(1)
    s = PowerFlowSolver(f)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.01, 0.01, f.n_bus)
    q = rng.uniform(-0.005, 0.005, f.n_bus)
    v1 = s.solve(p, q, warm=False)
    v2 = s.solve(p + 1e-4, q)
    it_warm = s.last_iterations
    s.solve(p + 1e-4, q, warm=False)
    assert it_warm <= s.last_iterations
    assert np.max(np.abs(v1 - v2)) < 1e-2


def test_feeder_rejects_bad_topology():
    with pytest.raises(ValueError):
        RadialFeeder(np.array([0, 3]), np.ones(2) * 0.01, np.ones(2) * 0.01, np.array([0]))


def feeder_env(seed=0):
    f = make_feeder(seed)
    tr = synth_feeder_traces(seed, 1, f.n_bus, f.pv_buses, cadence_s=60)
    pv = np.full(f.n_pv, 0.025)
    return FeederEnv(f, tr, pv, 1.05 * pv)


def test_feeder_step_curtailment():
    env = feeder_env()
    env.k = 12 * 60
    p_av = env.p_available(env.k)
    res = feeder_step(env, p_av, np.zeros_like(p_av))
    assert res.curtailment == 0.0
    res0 = feeder_step(env, np.zeros_like(p_av), np.zeros_like(p_av))
    np.testing.assert_allclose(res0.curtailment, p_av.sum())
    with pytest.raises(AssertionError):
        feeder_step(env, p_av + 0.01, np.zeros_like(p_av))


def test_env_observation_layout():
    env = feeder_env()
    env.k = 600
    obs = env.observation(600)
    assert obs["p_av"].shape == (env.feeder.n_bus,)
    np.testing.assert_allclose(obs["p_av"][env.feeder.pv_buses], env.p_available(600))
