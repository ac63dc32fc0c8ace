import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toys2s import toyearth as te


def _zero_state(p):
    R, K, J = p.R, p.K, p.J
    return te.ToyState(np.zeros((R, K)), np.zeros((R, K * J)), np.zeros((R, K)), np.zeros((R, K)))


def _random_state(p, seed):
    rng = np.random.default_rng(seed)
    R, K, J = p.R, p.K, p.J
    return te.ToyState(rng.normal(2, 3, (R, K)), rng.normal(0, 0.3, (R, K * J)),
                       rng.normal(0, 1, (R, K)), rng.uniform(0, 1, (R, K)))


def _spun_up(p, seed=0, n=200):
    s, _ = te.integrate(te.initial_state(p, seed), p, 0, n, record=False)
    return s


def _dist(a, b):
    return math.sqrt(sum(float(((u - v) ** 2).sum()) for u, v in zip(a.arrays(), b.arrays())))


def _oracle_tendency(s, p, F):
    """Index-by-index transcription of the governing equations."""
    R, K, J = p.R, p.K, p.J
    X, Y, O, L = s.arrays()
    hcb = p.h * p.c / p.b
    dX, dY, dO, dL = (np.zeros_like(a) for a in (X, Y, O, L))
    for r in range(R):
        for k in range(K):
            ysum = sum(Y[r, k * J + j] for j in range(J))
            dX[r, k] = (-X[r, (k - 1) % K] * (X[r, (k - 2) % K] - X[r, (k + 1) % K])
                        - X[r, k] + F[r] - hcb * ysum + p.gamma * O[r, k])
            dO[r, k] = (p.gamma * X[r, k] - O[r, k]) / p.tau_o
            dL[r, k] = (max(0.0, X[r, k] - p.x_p) - L[r, k]) / p.tau_l
        n = K * J
        for j in range(n):
            dY[r, j] = (-p.c * p.b * Y[r, (j + 1) % n] * (Y[r, (j + 2) % n] - Y[r, (j - 1) % n])
                        - p.c * Y[r, j] + hcb * X[r, j // J])
    return dX, dY, dO, dL


def test_fixed_point():
    p = te.ToyParams(F=0.0, x_p=1.0)
    s = _zero_state(p)
    d = te.tendency(s, p)
    assert all(np.all(a == 0) for a in d.arrays())
    out = te.step_rk4(s, p)
    assert all(np.array_equal(a, b) for a, b in zip(out.arrays(), s.arrays()))


def test_uncoupled_limit_matches_oracle():
    p = te.ToyParams(K=8, J=3, R=2, h=0.0, gamma=0.0)
    s = _random_state(p, 1)
    d = te.tendency(s, p)
    want = _oracle_tendency(s, p, p.forcing)
    for a, b in zip(d.arrays(), want):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    # classical single-scale form
    X = s.X
    lorenz = -np.roll(X, 1, 1) * (np.roll(X, 2, 1) - np.roll(X, -1, 1)) - X + 8.0
    np.testing.assert_allclose(d.X, lorenz, rtol=1e-13, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_coupled_tendency_matches_oracle(seed):
    p = te.ToyParams(K=5, J=3, R=2, F=(7.0, 9.0))
    s = _random_state(p, seed)
    for a, b in zip(te.tendency(s, p).arrays(), _oracle_tendency(s, p, p.forcing)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_energy_identity(seed):
    p = te.ToyParams(K=12, J=3, R=3, F=0.0, h=0.0, gamma=0.0)
    s = _random_state(p, seed)
    d = te.tendency(s, p)
    lhs = float((s.X * d.X).sum())
    assert lhs == pytest.approx(-float((s.X ** 2).sum()), abs=1e-10)


def test_tendency_does_not_mutate():
    p = te.ToyParams(K=6, J=3, R=2)
    s = _random_state(p, 2)
    before = [a.copy() for a in s.arrays()]
    te.tendency(s, p)
    assert all(np.array_equal(a, b) for a, b in zip(before, s.arrays()))


def test_non_finite_rejected():
    p = te.ToyParams(K=6, J=3, R=2)
    s = _random_state(p, 3)
    s.X[0, 0] = np.nan
    with pytest.raises(te.IntegrationDiverged):
        te.tendency(s, p)


def test_blowup_detected():
    p = te.ToyParams(K=6, J=3, R=2)
    s = replace(_random_state(p, 4), X=np.full((2, 6), 2e6))
    with pytest.raises(te.IntegrationDiverged):
        te.step_rk4(s, p)


def test_rk4_local_order():
    p = te.ToyParams()
    s = _spun_up(p)

    def local_error(dt):
        coarse = te.step_rk4(s, p, dt=dt)
        fine = s
        for _ in range(64):
            fine = te.step_rk4(fine, p, dt=dt / 64)
        return _dist(coarse, fine)

    e = [local_error(dt) for dt in (0.004, 0.002)]
    order = math.log2(e[0] / e[1])
    assert order >= 4.5


def test_rk4_global_order():
    p = te.ToyParams()
    s = _spun_up(p)
    T = 0.004

    def run(n):
        x = s
        for _ in range(n):
            x = te.step_rk4(x, p, dt=T / n)
        return x

    ref = run(64)
    e = [_dist(run(n), ref) for n in (1, 2, 4)]
    assert math.log2(e[0] / e[1]) >= 3.8
    assert math.log2(e[1] / e[2]) >= 3.8


def test_compiled_kernel_matches_reference():
    p = te.ToyParams()
    s = _spun_up(p, n=20)
    F = te.seasonal_forcing(p, 123)
    a = s
    for _ in range(10):
        a = te.step_rk4(a, p, forcing=F)
    b = te.advance(s, p, 10, forcing=F)
    for u, v in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(u, v, rtol=1e-11, atol=1e-11)


def test_trajectory_determinism():
    p = te.ToyParams()
    s0 = te.initial_state(p, 7)
    a, ra = te.integrate(s0, p, 0, 40)
    b, rb = te.integrate(te.initial_state(p, 7), p, 0, 40)
    assert np.array_equal(ra, rb)
    assert all(np.array_equal(u, v) for u, v in zip(a.arrays(), b.arrays()))


def test_observe_examples():
    p = te.ToyParams(K=6, J=3, R=2)
    s = _random_state(p, 5)
    snap = te.observe(s, p)
    X, O, L = s.X, s.O, s.L
    for r in range(p.R):
        for k in range(p.K):
            P = max(0.0, X[r, k] - p.x_p)
            want = [X[r, k], X[r, k] + 0.5 * O[r, k] + 0.25 * L[r, k], P, 2 - P, O[r, k], L[r, k]]
            assert snap[:, r, k].tolist() == pytest.approx(want, abs=1e-15)
    dry = te.observe(s, replace(p, x_p=1e9))
    assert np.all(dry[2] == 0) and np.all(dry[3] == 2)
    s0 = replace(s, O=np.zeros_like(s.O), L=np.zeros_like(s.L))
    snap0 = te.observe(s0, p)
    assert np.array_equal(snap0[1], snap0[0])
    with pytest.raises(ValueError):
        te.observe(s, te.ToyParams(K=7, J=3, R=2))


def test_params_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        te.ToyParams(tau_o_days=5.0, tau_l_days=10.0)
    with pytest.raises(ValueError):
        te.ToyParams(dt=0.0)
    p = te.ToyParams(F=(8.0,) * 7 + (9.0,))
    f = tmp_path / "toy.json"
    import json
    f.write_text(json.dumps(p.to_dict()))
    assert te.ToyParams.from_json(f) == p
    lat = te.ring_latitudes(8)
    assert sorted(np.abs(lat).tolist()) == [10, 10, 30, 30, 50, 50, 70, 70]


@pytest.fixture(scope="module")
def truth2():
    return te.gen_truth(te.ToyParams(), 2, 0)


def test_gen_truth_layout(truth2):
    a = truth2
    assert a.variables == te.TRUTH_VARIABLES
    assert a.n_times == 2 * 1440
    assert np.all(np.diff(a.times) == 6) and a.times[0] == 0
    assert np.all(a.field("tp") >= 0) and np.all(a.field("swvl") >= 0)
    with pytest.raises(ValueError):
        te.gen_truth(te.ToyParams(spinup_years=0.5), 1, 0)


def test_gen_truth_seeds(truth2):
    again = te.gen_truth(te.ToyParams(), 1, 0)
    assert np.array_equal(again.values, truth2.values[:, :1440])
    other = te.gen_truth(te.ToyParams(), 1, 1)
    x, y = truth2.field("z500")[:1440], other.field("z500")
    x = x - x.mean(0)
    y = y - y.mean(0)
    corr = float((x * y).sum() / math.sqrt((x * x).sum() * (y * y).sum()))
    assert abs(corr) < 0.2


def _efold_steps(x):
    x = x - x.mean(0)
    v = float((x * x).mean())
    for lag in range(1, x.shape[0]):
        if float((x[lag:] * x[:-lag]).mean()) / v < math.exp(-1):
            return lag
    return x.shape[0]


def test_ocean_slower_than_atmosphere(truth2):
    assert _efold_steps(truth2.field("sst")) >= 5 * _efold_steps(truth2.field("z500"))


def test_positive_lyapunov():
    assert te.lyapunov_estimate(te.ToyParams(), 0) > 0
