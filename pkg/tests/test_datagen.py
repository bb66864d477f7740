import json

import numpy as np
import pytest
from scipy import stats

from ddpc_swarm.behavioral import TrajectoryData, required_data_length
from ddpc_swarm.datagen import ExcitationConfig, audit, collect, write_audit
from ddpc_swarm.errors import SimulationDivergence
from ddpc_swarm.planner import nominal_input
from ddpc_swarm.plant.srb import Swarm, SwarmConfig, contact_schedule
from ddpc_swarm.plant.tracking import TrackingGains


def short(n_agents=1, duration=2.0, **kw):
    kw.setdefault("seed", 5)
    return Swarm(SwarmConfig(n_agents=n_agents)), ExcitationConfig(duration=duration, **kw)


def stance_per_sample(T):
    return contact_schedule(0, T, 100.0)


def test_zero_amplitude_records_nominal_and_fails_pe():
    swarm, ex = short(amplitude_z=0, amplitude_xy=0, tracking=TrackingGains.off(),
                      velocity_gain=0.0)
    d = collect(swarm, ex)
    flags = stance_per_sample(d.T)
    nominal = np.array([nominal_input(f, 12.45, 9.81)[0] for f in flags])
    assert np.array_equal(d.u_samples, nominal)
    rep = d.meta["audit"]
    assert not rep["pe_ok"]
    assert rep["pe_order_achieved"] <= 1
    rep = audit(d, 2, 3, 1)
    assert not rep["pe_ok"]


def test_seeded_collection_is_bitwise_repeatable():
    a = collect(*short(n_agents=2))
    b = collect(*short(n_agents=2))
    assert np.array_equal(a.u_samples, b.u_samples)
    assert np.array_equal(a.y_samples, b.y_samples)
    c = collect(*short(n_agents=2, seed=6))
    assert not np.array_equal(a.u_samples, c.u_samples)


def test_swing_legs_record_zero_force():
    d = collect(*short(n_agents=2))
    flags = stance_per_sample(d.T)
    u = d.u_samples.reshape(d.T, 2, 4, 3)
    assert np.all(u[~np.broadcast_to(flags[:, None, :], u.shape[:3])] == 0)
    assert d.agent_dims == [(12, 6), (12, 6)]


@pytest.mark.slow
def test_noise_is_zero_mean_uniform_and_independent():
    # Without the velocity push the recorded force is nominal plus noise.
    swarm, ex = short(duration=20.0, amplitude_z=15.0, amplitude_xy=5.0, velocity_gain=0.0)
    d = collect(swarm, ex)
    flags = stance_per_sample(d.T)
    nominal = np.array([nominal_input(f, 12.45, 9.81)[0] for f in flags])
    noise = (d.u_samples - nominal).reshape(d.T, 4, 3)
    # Nominal part supports the weight exactly.
    np.testing.assert_allclose(nominal.reshape(d.T, 4, 3)[:, :, 2].sum(axis=1), 12.45 * 9.81,
                               atol=1e-9)
    on = noise[flags]  # (samples, 3)
    for c, a in ((0, 5.0), (1, 5.0), (2, 15.0)):
        x = on[:, c]
        assert stats.kstest(x, stats.uniform(-a, 2 * a).cdf).pvalue > 0.01
        assert stats.ttest_1samp(x, 0.0).pvalue > 0.01
    # Lag-one and cross-channel correlations of one leg are insignificant.
    leg = noise[flags[:, 0], 0]
    n = leg.shape[0]
    for x, y in ((leg[:-1, 2], leg[1:, 2]), (leg[:, 0], leg[:, 2]), (leg[:, 0], leg[:, 1])):
        assert stats.pearsonr(x, y).pvalue > 0.01
    assert n > 500


def test_divergence_salvages_partial_data():
    swarm, ex = short(amplitude_z=0, amplitude_xy=0, tracking=TrackingGains.off(),
                      velocity_gain=0.0, duration=5.0)
    swarm.push(0, [0.0, 0.0, -3.0])
    with pytest.raises(SimulationDivergence) as err:
        collect(swarm, ex)
    part = err.value.partial
    assert isinstance(part, TrajectoryData)
    assert 0 < part.T < ex.n_samples
    assert part.u_samples.shape[1] == 12


def test_excitation_config_validation():
    with pytest.raises(ValueError):
        ExcitationConfig(amplitude_z=-1.0)
    with pytest.raises(ValueError):
        ExcitationConfig(duration=0.0)
    ex = ExcitationConfig(tracking={"kp_z": 1.0})
    assert ex.tracking.kp_z == 1.0 and ex.n_samples == 10000
    swarm = Swarm(SwarmConfig(n_agents=1))
    with pytest.raises(ValueError):
        collect(swarm, ExcitationConfig(record_rate=50.0))


def test_audit_margin_arithmetic():
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, size=(400, 2))
    d = TrajectoryData(u, np.zeros((400, 1)), 100.0)
    rep = audit(d, 6, 10, 4)
    assert rep["length_bound"] == (2 + 1) * (6 + 10 + 4) - 1
    assert rep["length_margin"] == 400 - rep["length_bound"]
    assert rep["length_ok"]
    assert rep["length_bound"] == required_data_length(2, 4, 6, 10)


def test_audit_iid_reaches_requested_order(tmp_path):
    rng = np.random.default_rng(1)
    d = TrajectoryData(rng.normal(size=(300, 3)), np.zeros((300, 2)), 100.0)
    rep = audit(d, 5, 10, 6)
    assert rep["pe_order_required"] == 21
    assert rep["pe_order_achieved"] == 21
    assert rep["pe_ok"]
    s = np.array(rep["singular_values"])
    assert s.size == 3 * 21 and s.min() > 1e-6
    path = write_audit(rep, tmp_path / "audit.json")
    assert json.loads(path.read_text())["pe_order_achieved"] == 21


def test_audit_short_data_fails_length():
    rng = np.random.default_rng(2)
    d = TrajectoryData(rng.normal(size=(50, 3)), np.zeros((50, 2)), 100.0)
    rep = audit(d, 5, 10, 6)
    assert not rep["length_ok"] and rep["length_margin"] < 0
    assert not rep["pe_ok"]


@pytest.mark.slow
def test_default_swarm_collection_passes_audit(srb_workspace):
    rep = json.loads((srb_workspace / "audit.json").read_text())
    assert rep["T"] == 10000
    assert rep["m_total"] == 36
    assert rep["length_ok"] and rep["length_margin"] == 10000 - (37 * (10 + 25 + 36) - 1)
    assert rep["pe_ok"] and rep["pe_order_achieved"] == 71
