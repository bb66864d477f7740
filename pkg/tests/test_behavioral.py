import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddpc_swarm.behavioral import (TrajectoryData, build_hankel, check_data_length,
                                   is_persistently_exciting, is_trajectory, persistency_order,
                                   required_data_length, split_past_future, trajectory_residual)
from ddpc_swarm.errors import DimensionError

from conftest import lti_dataset


def naive_hankel(signal, L):
    s = np.asarray(signal, float).reshape(len(signal), -1)
    T, q = s.shape
    H = np.zeros((q * L, T - L + 1))
    for r in range(L):
        for c in range(T - L + 1):
            H[r * q:(r + 1) * q, c] = s[c + r]
    return H


def test_scalar_hankel_matches_display():
    H = build_hankel([1, 2, 3, 4], 2)
    np.testing.assert_array_equal(H, [[1, 2, 3], [2, 3, 4]])


def test_full_depth_gives_single_column():
    s = np.arange(12.0).reshape(6, 2)
    H = build_hankel(s, 6)
    assert H.shape == (12, 1)
    np.testing.assert_array_equal(H[:, 0], s.ravel())


def test_two_channel_index_arithmetic():
    s = np.random.default_rng(0).normal(size=(10, 2))
    H = build_hankel(s, 3)
    assert H.shape == (6, 8)
    assert H[2 * 1 + 0, 4] == s[5][0]


@pytest.mark.parametrize("depth", [0, 5])
def test_bad_depth_raises(depth):
    with pytest.raises(DimensionError):
        build_hankel([1.0, 2.0, 3.0, 4.0], depth)


def test_empty_signal_raises():
    with pytest.raises(DimensionError):
        build_hankel(np.zeros((0, 2)), 1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 25), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3)),
       st.data())
def test_hankel_matches_loop_oracle_and_shift_structure(sig, data):
    T, q = sig.shape
    L = data.draw(st.integers(1, T))
    H = build_hankel(sig, L)
    np.testing.assert_array_equal(H, naive_hankel(sig, L))
    for r in range(L - 1):
        np.testing.assert_array_equal(H[(r + 1) * q:(r + 2) * q, :-1], H[r * q:(r + 1) * q, 1:])


def test_pe_examples():
    assert is_persistently_exciting(np.full(10, 3.0), 1)
    assert not is_persistently_exciting(np.full(10, 3.0), 2)
    u = np.random.default_rng(7).uniform(-1, 1, size=(60, 2))
    # Oracle: rank of the 10 x 56 Hankel by SVD.
    s = np.linalg.svd(naive_hankel(u, 5), compute_uv=False)
    assert np.sum(s > 1e-10 * s[0]) == 10
    assert is_persistently_exciting(u, 5)


def test_pe_short_signal_is_false_without_svd():
    u = np.random.default_rng(0).normal(size=(8, 2))
    # 8 - 4 + 1 = 5 columns < 8 rows
    assert not is_persistently_exciting(u, 4)


def test_persistency_order_of_constant_and_noise():
    assert persistency_order(np.ones(50), 10) == 1
    u = np.random.default_rng(3).uniform(-1, 1, size=200)
    assert persistency_order(u, 30) == 30


def test_data_length_bound_examples():
    assert check_data_length(1, 2, 1, 2, 9)
    assert not check_data_length(1, 2, 1, 2, 8)
    assert required_data_length(12, 12, 10, 25) == 610
    assert check_data_length(12, 12, 10, 25, 610)
    assert not check_data_length(12, 12, 10, 25, 609)


@given(st.integers(1, 5), st.integers(1, 8), st.integers(1, 12), st.integers(1, 30))
def test_data_length_bound_is_monotone(m, n, T_ini, N):
    b = required_data_length(m, n, T_ini, N)
    assert b == (m + 1) * (T_ini + N + n) - 1
    for args in [(m + 1, n, T_ini, N), (m, n + 1, T_ini, N), (m, n, T_ini + 1, N),
                 (m, n, T_ini, N + 1)]:
        assert required_data_length(*args) > b


def test_split_small_scalar_example():
    d = TrajectoryData(np.arange(5.0), np.zeros(5))
    b = split_past_future(d, 1, 1)
    np.testing.assert_array_equal(b.U_p, [[0, 1, 2, 3]])
    np.testing.assert_array_equal(b.U_f, [[1, 2, 3, 4]])


def test_split_swarm_dimensions():
    rng = np.random.default_rng(0)
    d = TrajectoryData(rng.normal(size=(100, 36)), rng.normal(size=(100, 18)),
                       agent_dims=[(12, 6)] * 3)
    b = split_past_future(d, 10, 25)
    assert b.U_p.shape[0] == 360 and b.U_f.shape[0] == 900
    assert b.Y_p.shape[0] == 180 and b.Y_f.shape[0] == 450
    assert b.n_cols == 100 - 35 + 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2**31 - 1))
def test_split_restacks_bit_exact(T_ini, N, m, p, seed):
    rng = np.random.default_rng(seed)
    d = TrajectoryData(rng.normal(size=(20, m)), rng.normal(size=(20, p)))
    b = split_past_future(d, T_ini, N)
    np.testing.assert_array_equal(np.vstack([b.U_p, b.U_f]), build_hankel(d.u_samples, T_ini + N))
    np.testing.assert_array_equal(np.vstack([b.Y_p, b.Y_f]), build_hankel(d.y_samples, T_ini + N))


def test_split_too_short_raises():
    d = TrajectoryData(np.zeros(5), np.zeros(5))
    with pytest.raises(DimensionError):
        split_past_future(d, 3, 3)


def test_trajectory_data_invariants():
    with pytest.raises(DimensionError):
        TrajectoryData(np.zeros((4, 2)), np.zeros((5, 1)))
    with pytest.raises(ValueError):
        TrajectoryData(np.array([0.0, np.nan]), np.zeros(2))
    with pytest.raises(DimensionError):
        TrajectoryData(np.zeros((4, 3)), np.zeros((4, 2)), agent_dims=[(1, 1), (1, 1)])


def test_trajectory_data_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    d = TrajectoryData(rng.normal(size=(30, 4)), rng.normal(size=(30, 2)), sample_rate=100.0,
                       agent_dims=[(2, 1), (2, 1)])
    d.save(tmp_path / "d.csv")
    e = TrajectoryData.load(tmp_path / "d.csv")
    np.testing.assert_array_equal(e.u_samples, d.u_samples)
    np.testing.assert_array_equal(e.y_samples, d.y_samples)
    assert e.agent_dims == d.agent_dims and e.sample_rate == 100.0


def test_reader_rejects_length_mismatch(tmp_path):
    d = TrajectoryData(np.zeros((5, 1)), np.zeros((5, 1)))
    d.save(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    (tmp_path / "d.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DimensionError):
        TrajectoryData.load(tmp_path / "d.csv")


def test_recorded_window_is_trajectory_with_zero_residual():
    rng = np.random.default_rng(2)
    _, d = lti_dataset(rng, T=120)
    b = split_past_future(d, 4, 6)
    u_bar = d.u_samples[17:27].ravel()
    y_bar = d.y_samples[17:27].ravel()
    assert trajectory_residual(b, u_bar, y_bar) < 1e-12
    assert is_trajectory(b, u_bar, y_bar)


def test_fresh_trajectory_accepted_and_perturbed_rejected():
    rng = np.random.default_rng(11)
    plant, d = lti_dataset(rng, n=4, m=1, p=1, T=200)
    b = split_past_future(d, 4, 6)
    u = rng.uniform(-1, 1, size=(10, 1))
    x0 = rng.normal(size=4)
    y, _ = plant.simulate(u, x0=x0)
    assert trajectory_residual(b, u, y) < 1e-8
    y_bad = y.copy()
    y_bad[3, 0] += 1.0
    assert trajectory_residual(b, u, y_bad) > 1e-3
    assert not is_trajectory(b, u, y_bad)


def test_is_trajectory_dimension_mismatch():
    rng = np.random.default_rng(0)
    _, d = lti_dataset(rng, T=60)
    b = split_past_future(d, 2, 3)
    with pytest.raises(DimensionError):
        is_trajectory(b, np.zeros(3), np.zeros(10))
