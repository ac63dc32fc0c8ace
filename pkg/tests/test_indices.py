import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toys2s import indices as ix
from toys2s.gridstore import Grid


# ---------------------------------------------------------------------------- EOFs


def _wave(T=400, K=32, k=2, omega=2 * np.pi / 50, noise=0.0, seed=0):
    x = 2 * np.pi * np.arange(K) / K
    t = np.arange(T)[:, None]
    d = np.cos(k * x[None, :] - omega * t)
    if noise:
        d = d + noise * np.random.default_rng(seed).standard_normal(d.shape)
    return d, x


def test_rank_one():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(20)
    a = rng.standard_normal(50)
    b = ix.eof_pair(a[:, None] * p[None, :])
    cos = abs(b.patterns[0] @ p) / np.linalg.norm(p)
    assert cos == pytest.approx(1.0, abs=1e-12)
    assert b.eigenvalues[1] == pytest.approx(0.0, abs=1e-10 * b.eigenvalues[0])
    assert abs(b.patterns[0] @ b.patterns[1]) < 1e-8


def test_degenerate_raises():
    with pytest.raises(ix.IndexError_):
        ix.eof_pair(np.ones((10, 5)))
    with pytest.raises(ix.IndexError_):
        ix.eof_pair(np.ones((1, 5)))


def test_propagating_wave():
    d, x = _wave()
    b = ix.eof_pair(d)
    span = np.stack([np.cos(2 * x), np.sin(2 * x)])
    span /= np.linalg.norm(span, axis=1, keepdims=True)
    for e in b.patterns:
        assert np.linalg.norm(span @ e) == pytest.approx(1.0, abs=1e-6)
    assert b.eigenvalues[1] / b.eigenvalues[0] == pytest.approx(1.0, abs=0.02)
    pcs = b.project(d - d.mean(0))
    lag = int(round(50 / 4))  # quarter period
    c0 = np.corrcoef(pcs[:, 0], pcs[:, 1])[0, 1]
    c_lag = np.corrcoef(pcs[lag:, 0], pcs[:-lag, 1])[0, 1]
    assert abs(c0) < 0.05 and abs(c_lag) > 0.95


@pytest.mark.parametrize("T,S", [(30, 12), (12, 30)])
def test_eigenvalues_match_svd(T, S):
    rng = np.random.default_rng(T)
    d = rng.standard_normal((T, S)) @ rng.standard_normal((S, S))
    w = rng.uniform(0.2, 1.0, S)
    b = ix.eof_pair(d, w)
    Xw = (d - d.mean(0)) * np.sqrt(w)
    s = np.linalg.svd(Xw, compute_uv=False)
    lam = s ** 2 / (T - 1)
    np.testing.assert_allclose(b.eigenvalues, lam[:2], rtol=1e-10)
    np.testing.assert_allclose(b.explained, lam[:2] / lam.sum(), rtol=1e-10)
    assert b.explained.sum() <= 1 and b.explained[0] >= b.explained[1]
    G = b.patterns @ b.patterns.T
    np.testing.assert_allclose(G, np.eye(2), atol=1e-10)
    assert b.patterns[0][np.argmax(np.abs(b.patterns[0]))] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((25, 9)) * rng.uniform(0.5, 3, 9)
    w = rng.uniform(0.3, 1.0, 9)
    perm = rng.permutation(9)
    a = ix.eof_pair(d, w)
    b = ix.eof_pair(d[:, perm], w[perm])
    np.testing.assert_allclose(b.patterns, a.patterns[:, perm], atol=1e-8)
    np.testing.assert_allclose(b.eigenvalues, a.eigenvalues, rtol=1e-10)


# ---------------------------------------------------------------------------- filter


def test_filter_constant_and_history():
    x = np.full((600, 3), 4.2)
    assert np.allclose(ix.intraseasonal_filter(x), 0.0, atol=1e-12)
    with pytest.raises(ix.IndexError_):
        ix.intraseasonal_filter(np.zeros((480, 2)))


def test_filter_linear_trend():
    a = 0.3
    t = np.arange(700, dtype=float)
    out = ix.intraseasonal_filter(a * t)
    n = 480
    direct = [a * t[i] - sum(a * t[j] for j in range(i - n, i)) / n for i in range(n, 700)]
    np.testing.assert_allclose(out, direct, rtol=1e-10)
    np.testing.assert_allclose(out, a * (n + 1) / 2, rtol=1e-10)


def test_filter_30_day_sinusoid():
    t = np.arange(4 * 400)
    x = np.sin(2 * np.pi * t / (30 * 4))
    out = ix.intraseasonal_filter(x)
    amp = np.sqrt(2) * out.std()
    assert abs(amp - 1.0) < 0.15


# ---------------------------------------------------------------------------- band mean / Hovmoller


def test_band_and_hovmoller():
    g = Grid.regular(18, 36)
    uniform = np.broadcast_to(np.arange(10.0)[:, None, None], (10,) + g.shape)
    h = ix.hovmoller(uniform, g)
    assert h.shape == (10, 36)
    assert np.all(h == h[:, :1])
    with pytest.raises(ix.IndexError_):
        ix.band_mean(uniform, Grid(np.array([40.0, 60.0]), np.arange(36) * 10.0))


def test_hovmoller_ridge_slope():
    g = Grid.regular(18, 36)
    speed = 0.5  # cells per step
    T = 60
    k = np.arange(36)
    pos = speed * np.arange(T)
    d = (k[None, :] - pos[:, None] + 18) % 36 - 18
    field = np.exp(-0.5 * (d / 2.0) ** 2)
    h = ix.hovmoller(np.broadcast_to(field[:, None, :], (T,) + g.shape), g)
    ridge = np.unwrap(np.argmax(h, axis=1) * 2 * np.pi / 36) * 36 / (2 * np.pi)
    steps = np.diff(ridge)
    assert np.all(np.abs(steps - speed) <= 1.0)
    assert np.polyfit(np.arange(T), ridge, 1)[0] == pytest.approx(speed, abs=0.05)


# ---------------------------------------------------------------------------- RMM


def _planted_fields(T=600, K=36, seed=0):
    x = 2 * np.pi * np.arange(K) / K
    omega = 2 * np.pi / 200
    t = np.arange(T)[:, None]
    rng = np.random.default_rng(seed)
    olr = np.cos(x - omega * t) + 0.05 * rng.standard_normal((T, K))
    u1 = 3 * np.sin(x - omega * t) + 0.05 * rng.standard_normal((T, K))
    u2 = -2 * np.cos(x - omega * t) + 0.05 * rng.standard_normal((T, K))
    return olr, u1, u2


def test_rmm_projection_identity():
    basis = ix.rmm_basis(*_planted_fields())
    f = [p * basis.pc_std[0] for p in basis.field_patterns(0)]
    idx = ix.rmm_project(*(a[None, :] for a in f), basis)
    assert idx.rmm1[0] == pytest.approx(1.0, abs=1e-12)
    assert idx.rmm2[0] == pytest.approx(0.0, abs=1e-12)


def test_rmm_planted_wave_advances():
    fields = _planted_fields()
    basis = ix.rmm_basis(*fields)
    idx = ix.rmm_project(*fields, basis)
    ang = np.unwrap(np.arctan2(idx.rmm2, idx.rmm1))
    assert np.all(np.diff(ang) > 0)
    assert np.all(idx.amplitude >= 0)


def test_rmm_zero_and_mismatch():
    fields = _planted_fields()
    basis = ix.rmm_basis(*fields)
    z = np.zeros((3, 36))
    idx = ix.rmm_project(z, z, z, basis)
    assert np.all(idx.amplitude == 0) and np.all(idx.phase == 0)
    with pytest.raises(ix.IndexError_):
        ix.rmm_project(z, z, np.zeros((3, 35)), basis)


def test_rmm_phase_examples():
    ph, amp = ix.rmm_phase(1.0, 1.0)
    assert amp == pytest.approx(math.sqrt(2), abs=1e-15)
    assert ix.rmm_phase(1.0, 0.0)[0] == 5
    assert ix.rmm_phase(-1.0, -1.0)[0] == 2
    # half-open octants: boundaries belong to the octant they open
    angles = np.arange(8) * 45.0
    ph, _ = ix.rmm_phase(np.cos(np.radians(angles + 1e-9)), np.sin(np.radians(angles + 1e-9)))
    assert ph.tolist() == [5, 6, 7, 8, 1, 2, 3, 4]


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_rmm_phase_partition(a, b):
    ph, amp = ix.rmm_phase(a, b)
    if a == 0 and b == 0:
        assert ph == 0
    else:
        assert 1 <= ph <= 8
        theta = math.degrees(math.atan2(b, a)) % 360
        assert ph == [5, 6, 7, 8, 1, 2, 3, 4][int(theta // 45) % 8]


def test_bivariate_examples():
    rng = np.random.default_rng(0)
    o1, o2 = rng.standard_normal((2, 40))
    assert ix.bivariate_skill(o1, o2, o1, o2) == pytest.approx(1.0, abs=1e-15)
    assert ix.bivariate_skill(-o1, -o2, o1, o2) == pytest.approx(-1.0, abs=1e-15)
    assert ix.bivariate_skill(-o2, o1, o1, o2) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ix.IndexError_):
        ix.bivariate_skill(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    with pytest.raises(ix.IndexError_):
        ix.bivariate_skill(o1[:3], o2[:3], o1, o2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 2 * math.pi))
def test_bivariate_rotation_invariance(seed, phi):
    rng = np.random.default_rng(seed)
    f1, f2, o1, o2 = rng.standard_normal((4, 20))
    c, s = math.cos(phi), math.sin(phi)

    def rot(a, b):
        return c * a - s * b, s * a + c * b

    assert ix.bivariate_skill(*rot(f1, f2), *rot(o1, o2)) == pytest.approx(
        ix.bivariate_skill(f1, f2, o1, o2), abs=1e-12)


# ---------------------------------------------------------------------------- NAO


NAO_GRID = Grid.regular(18, 36)


def _dipole(grid):
    lat = grid.lat[:, None]
    lon = grid.lon[None, :]
    dl = (lon - 330 + 180) % 360 - 180
    north = np.exp(-((lat - 65) / 8) ** 2 - (dl / 30) ** 2)
    south = np.exp(-((lat - 40) / 8) ** 2 - (dl / 30) ** 2)
    return south - north  # positive phase: low up north


def test_nao_planted_recovery():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(300)
    a -= a.mean()  # anomalies over the window
    z = a[:, None, None] * _dipole(NAO_GRID) + 0.1 * rng.standard_normal((300,) + NAO_GRID.shape)
    idx = ix.nao_index(z, NAO_GRID)
    assert np.corrcoef(idx.values, a)[0, 1] > 0.99
    assert abs(idx.values.mean()) < 0.05
    assert np.mean(idx.values ** 2) == pytest.approx(1.0, abs=1e-12)


def test_nao_pattern_identity_and_orthogonal():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(200)
    z = a[:, None, None] * _dipole(NAO_GRID) + 0.2 * rng.standard_normal((200,) + NAO_GRID.shape)
    m = ix.fit_nao(z, NAO_GRID)
    pat = m.pattern(NAO_GRID)
    assert m.index(pat[None]).values[0] == pytest.approx(1.0, abs=1e-12)
    # positive index = below-normal heights at the northern centre
    j = int(np.argmin(np.abs(NAO_GRID.lon - 330)))
    i = int(np.argmin(np.abs(NAO_GRID.lat - 65)))
    assert pat[i, j] < 0
    # any anomaly outside the sector projects to zero
    outside = np.zeros(NAO_GRID.shape)
    outside[NAO_GRID.lat < 0] = 5.0
    assert m.index(outside[None]).values[0] == 0.0
    # inside the sector, remove the pattern component
    w = np.sqrt(np.broadcast_to(NAO_GRID.weights[:, None], NAO_GRID.shape).ravel()[m.points])
    e1 = m.eof.patterns[0]
    v = rng.standard_normal(e1.size)
    v -= (v @ e1) * e1
    orth = np.zeros(NAO_GRID.nlat * NAO_GRID.nlon)
    orth[m.points] = v / w
    assert abs(m.index(orth.reshape(NAO_GRID.shape)[None]).values[0]) < 1e-12


def test_nao_region_absent():
    with pytest.raises(ix.IndexError_):
        ix.fit_nao(np.zeros((5, 2, 4)), Grid(np.array([-40.0, -20.0]), np.arange(4) * 90.0))


# ---------------------------------------------------------------------------- point patterns


def test_point_pattern_examples():
    g = Grid.regular(36, 72)  # 5 degree cells centred on x.5
    centers = ix.load_centers()
    assert set(centers) == {"PNA", "EA", "WP", "EU", "PJ"}
    zero = np.zeros((1,) + g.shape)
    assert ix.point_pattern_raw(zero, g, centers["PNA"])[0] == 0.0
    z = np.zeros(g.shape)
    for (lat, lon, sign, _), val in zip(centers["PNA"], (1, -1, 1, -1)):
        i, j = ix.nearest_point(g, lat, lon)
        z[i, j] = val
    assert ix.point_pattern_raw(z[None], g, centers["PNA"])[0] == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-5, 5))
def test_point_pattern_linear(seed, a):
    g = Grid.regular(18, 36)
    z = np.random.default_rng(seed).standard_normal((4,) + g.shape)
    for name, c in ix.load_centers().items():
        base = ix.point_pattern_raw(z, g, c)
        np.testing.assert_allclose(ix.point_pattern_raw(a * z, g, c), a * base, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(ix.point_pattern_raw(-z, g, c), -base)


def test_point_pattern_standardized():
    g = Grid.regular(18, 36)
    rng = np.random.default_rng(3)
    anom = rng.standard_normal((500,) + g.shape)
    zs = ix.standardized_anomalies(anom)
    for name, c in ix.load_centers().items():
        idx = ix.point_pattern_index(zs, g, c, name)
        assert abs(idx.values.mean()) < 0.15  # a 500-sample mean has standard error ~0.045
        assert np.var(idx.values) == pytest.approx(1.0, rel=0.05)


def test_center_outside_grid():
    g = Grid(np.array([-10.0, 10.0]), np.arange(36) * 10.0)
    with pytest.raises(ix.IndexError_):
        ix.point_pattern_raw(np.zeros((1, 2, 36)), g, [(60.0, 0.0, 1, 1.0)])


def test_load_centers_schema(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"schema_version": 2, "patterns": {}}')
    with pytest.raises(ix.IndexError_):
        ix.load_centers(p)


def test_index_csv():
    idx = ix.PatternIndex("NAO", np.array([0, 6]), np.array([0.5, -1.25]), np.zeros(2))
    assert ix.index_csv(idx) == "time,value\n0,0.5\n6,-1.25\n"
    r = ix.RmmIndex(np.array([0]), np.array([1.0]), np.array([0.0]), np.array([1.0]), np.array([5]))
    assert ix.index_csv(r).splitlines()[1] == "0,1.0,1.0,0.0,1.0,5"
