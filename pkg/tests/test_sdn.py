import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.linalg import expm

from sdnid import autodiff as ad
from sdnid.sdn import (
    DegenerateTrajectory, NormFactor, SweepFailed, SweepResult, SweepRun, choose,
    cross_validate_tau, default_grid, dft_omegas, effective_tau, mean_square,
    normalize_check, tau_frequency_domain, tau_from_variances,
)

from conftest import central_diff


def test_effective_tau_clamp():
    assert effective_tau(NormFactor(-0.5, 1e-6))[0] == 1e-6
    assert effective_tau(NormFactor(40.0, 1e-6))[0] == 40.0
    np.testing.assert_array_equal(effective_tau(NormFactor(3.0), n_x=4), [3.0] * 4)
    assert NormFactor([1.0, 2.0]).kind == "vector" and NormFactor(1.0).kind == "scalar"


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, 3, elements=st.floats(-1e6, 1e6)), st.floats(1e-12, 1.0))
def test_effective_tau_strictly_positive(raw, eps):
    assert (effective_tau(NormFactor(raw, eps)) > 0).all()


@pytest.mark.parametrize("raw,expected", [(0.7, 1.0), (-0.3, 0.0), (2e-6, 1.0)])
def test_effective_tau_gradient(raw, expected):
    t = ad.Tensor([[raw]], requires_grad=True)
    with ad.Tape() as tape:
        out = ad.sum(ad.clamp_min(t, 1e-6))
    g = ad.backward(tape, out)[t][0, 0]
    fd = central_diff(lambda v: float(np.maximum(v, 1e-6).sum()), np.array([[raw]]), h=1e-7)[0, 0]
    assert g == expected and fd == pytest.approx(expected, abs=1e-6)


def test_variance_of_dense_sine():
    t = np.linspace(0, 2 * np.pi, 200_001)[:-1]
    x, xd = np.sin(t), np.cos(t)
    assert mean_square(x) == pytest.approx(0.5, rel=1e-9)
    assert tau_from_variances(x, xd) == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("w", [0.05, 0.7, 3.0])
def test_sine_gives_inverse_frequency(w):
    t = np.arange(0, 200 * 2 * np.pi / w, 0.01 / w)
    assert tau_from_variances(np.sin(w * t), w * np.cos(w * t)) == pytest.approx(1 / w, rel=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_joint_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x, xd = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    assert tau_from_variances(c * x, c * xd) == pytest.approx(tau_from_variances(x, xd), rel=1e-12)


def test_degenerate_trajectories():
    with pytest.raises(DegenerateTrajectory):
        tau_from_variances(np.ones((10, 2)), np.zeros((10, 2)))
    with pytest.raises(DegenerateTrajectory):
        normalize_check(np.full(5, 3.0), np.zeros(5))
    with pytest.raises(ValueError):
        tau_from_variances(np.ones(3), np.ones(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_normalize_check_on_random_trajectories(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 2)) * rng.uniform(0.01, 100)
    xd = rng.normal(size=(40, 2)) * rng.uniform(0.01, 100)
    _, _, (vx, vd) = normalize_check(x, xd)
    assert abs(vx - 1) < 1e-9 and abs(vd - 1) < 1e-9


def test_dft_omegas_fold_negative():
    w = dft_omegas(6, 0.5)
    np.testing.assert_allclose(w * 6 * 0.5 / (2 * np.pi), [0, 1, 2, 3, -2, -1])


def test_single_bin_gives_inverse_frequency():
    N, Ts, m = 64, 2.0, 5
    U = np.zeros(N, complex)
    U[m] = 1.0
    U[N - m] = 1.0
    G = np.full(N, 0.3 + 0.1j)
    assert tau_frequency_domain(U, G, Ts) == pytest.approx(N * Ts / (2 * np.pi * m), rel=1e-12)


def test_two_equal_bins_hand_value():
    N, Ts = 32, 1.0
    U = np.zeros(N, complex)
    U[[2, 5]] = 1.0
    w1, w2 = 2 * np.pi * 2 / N, 2 * np.pi * 5 / N
    got = tau_frequency_domain(U, np.ones(N), Ts)
    assert got == pytest.approx(math.sqrt(2 / (w1**2 + w2**2)), rel=1e-12)


def test_dc_only_is_rejected_and_dc_counts_in_numerator():
    U = np.zeros(16, complex)
    U[0] = 3.0
    with pytest.raises(DegenerateTrajectory):
        tau_frequency_domain(U, np.ones(16), 1.0)
    U[1] = 1.0
    w1 = 2 * np.pi / 16
    assert tau_frequency_domain(U, np.ones(16), 1.0) == pytest.approx(math.sqrt(10) / w1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30))
def test_band_limited_lower_bound(seed, top):
    rng = np.random.default_rng(seed)
    N, Ts = 128, 0.5
    U = np.zeros(N, complex)
    U[1 : top + 1] = rng.normal(size=top) + 1j * rng.normal(size=top)
    G = rng.normal(size=(N, 2)) + 1j * rng.normal(size=(N, 2))
    omega_max = 2 * np.pi * top / (N * Ts)
    assert tau_frequency_domain(U, G, Ts) >= 1 / omega_max * (1 - 1e-12)


def test_frequency_route_matches_time_route_for_sampled_sine():
    N, Ts, m = 400, 0.1, 7
    t = np.arange(N) * Ts
    w = 2 * np.pi * m / (N * Ts)
    x = np.sin(w * t)
    U = np.fft.fft(x)
    td = tau_from_variances(x, w * np.cos(w * t))
    fd = tau_frequency_domain(U, np.ones(N), Ts)
    assert fd == pytest.approx(td, rel=0.01)


def test_normalize_check_on_lti_trajectories():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(1, 4)
        A = rng.normal(size=(n, n)) - 2 * n * np.eye(n)
        B = rng.normal(size=(n, 1))
        M = expm(np.block([[A, B], [np.zeros((1, n + 1))]]) * 0.1)
        x = np.zeros((200, n))
        u = rng.normal(size=200)
        for k in range(199):
            x[k + 1] = M[:n, :n] @ x[k] + M[:n, n] * u[k]
        xd = x @ A.T + u[:, None] @ B.T
        _, _, (vx, vd) = normalize_check(x, xd)
        assert abs(vx - 1) < 1e-9 and abs(vd - 1) < 1e-9


# --- sweep bookkeeping ------------------------------------------------------------


def _result(table):
    grid = sorted({g for g, *_ in table})
    runs = [SweepRun(g, s, v, v, d, 10) for g, s, v, d in table]
    return SweepResult(grid, runs)


def test_choose_median_and_ties():
    r = _result([(0.1, 0, 1.0, False), (0.1, 1, 3.0, False), (0.1, 2, 2.0, False),
                 (1.0, 0, 2.0, False), (1.0, 1, 0.5, False), (1.0, 2, 9.0, False)])
    # medians 2.0 and 2.0: tie goes to the smaller Ts/tau (larger tau)
    assert choose(r) == 0.1


def test_failed_points_are_excluded():
    r = _result([(0.1, 0, math.inf, True), (0.1, 1, math.inf, True), (1.0, 0, 5.0, False)])
    assert r.failed_points() == [0.1] and choose(r) == 1.0
    with pytest.raises(SweepFailed):
        choose(_result([(0.1, 0, math.inf, True)]))


def test_diverged_runs_count_as_infinite():
    r = _result([(1.0, 0, 0.2, True), (1.0, 1, 0.3, False), (1.0, 2, 0.4, False)])
    assert r.rmse_by_point()[1.0] == [math.inf, 0.3, 0.4]
    assert r.medians()[1.0] == 0.4


def test_sweep_table(tmp_path):
    from sdnid.data import read_table

    r = _result([(0.1, 0, 1.0, False), (1.0, 0, math.inf, True)])
    r.to_table(tmp_path / "s.csv")
    t = read_table(tmp_path / "s.csv")
    assert t["diverged"] == ["0", "1"] and t["ts_over_tau"] == ["0.10000000000000001", "1"]


def test_default_grid():
    g = default_grid()
    assert len(g) == 10 and g[0] == pytest.approx(1e-4) and g[-1] == pytest.approx(40.0)


def test_cross_validate_tiny_sweep():
    from sdnid.data import Pair, Signal
    from sdnid.train import RunConfig

    rng = np.random.default_rng(0)
    u = rng.normal(size=120)
    y = np.convolve(u, [0, 0.5, 0.3], mode="full")[:120]
    pair = Pair(Signal(u, 1.0), Signal(y, 1.0))
    cfg = RunConfig(n_x=2, n_a=2, n_b=2, hidden=4, J=8, batch=4, Ts=1.0, val_interval=5)
    a = cross_validate_tau(pair[:80], pair[80:], [0.5], 1, 10, cfg)
    assert len(a.runs) == 1 and a.chosen == 0.5
    b = cross_validate_tau(pair[:80], pair[80:], [0.1, 1.0], [3, 4], 10, cfg, test=pair[80:])
    c = cross_validate_tau(pair[:80], pair[80:], [0.1, 1.0], [3, 4], 10, cfg, test=pair[80:])
    assert [(r.ratio, r.seed) for r in b.runs] == [(0.1, 3), (0.1, 4), (1.0, 3), (1.0, 4)]
    assert [r.val_rmse for r in b.runs] == [r.val_rmse for r in c.runs]
    with pytest.raises(ValueError):
        cross_validate_tau(pair[:80], pair[80:], [1.0, 0.1], 1, 10, cfg)
    with pytest.raises(ValueError):
        cross_validate_tau(pair[:80], pair[80:], [1.0], 1, 0, cfg)
