"""Intraseasonal diagnostics: EOFs, RMM-style MJO index, NAO and point-pattern indices."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .gridstore import STEPS_PER_DAY, Grid, Region

# octant k = floor(theta / 45deg) of atan2(RMM2, RMM1) -> MJO phase
OCTANT_PHASE = np.array([5, 6, 7, 8, 1, 2, 3, 4])
NO_PHASE = 0
NAO_REGION = Region(20.0, 80.0, 270.0, 40.0, "nao")
FILTER_DAYS = 120


class IndexError_(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EofBasis:
    """Two leading EOFs in the sqrt(weight)-scaled space.

    ``patterns`` are orthonormal rows; ``project`` maps raw fields to PCs
    without removing a mean, so projections are linear in their input.
    """

    patterns: np.ndarray  # [2, S]
    eigenvalues: np.ndarray  # [2]
    explained: np.ndarray  # [2] fractions of total variance
    sqrt_weights: np.ndarray  # [S]

    def project(self, data) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        return (data * self.sqrt_weights) @ self.patterns.T

    def field_pattern(self, i: int) -> np.ndarray:
        """Field whose projection on EOF i is 1 and on the other EOF is 0."""
        return self.patterns[i] / self.sqrt_weights


def _phase_advance(pcs: np.ndarray) -> float:
    return float((pcs[:-1, 0] * pcs[1:, 1] - pcs[:-1, 1] * pcs[1:, 0]).sum())


def eof_pair(data, weights=None, center: bool = True, rank_tol: float = 1e-12) -> EofBasis:
    """Two leading eigenvectors of the weighted space-space covariance of ``data[T, S]``.

    Columns are scaled by sqrt(weights) before the decomposition, which runs
    on the smaller of the two Gram matrices.  Sign convention: the largest
    |loading| of e1 is positive; e2 is oriented so that the (PC1, PC2) phase
    advances counter-clockwise through the record (largest |loading| positive
    when the record shows no rotation).
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise IndexError_("need a [time, space] matrix with at least 2 time samples")
    T, S = X.shape
    w = np.ones(S) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (S,) or np.any(w <= 0):
        raise IndexError_("weights must be positive, one per column")
    sw = np.sqrt(w)
    Xc = X - X.mean(axis=0) if center else X
    Xw = Xc * sw
    denom = max(T - 1, 1)
    if T < S:
        vals, vecs = np.linalg.eigh(Xw @ Xw.T / denom)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        pats = []
        for i in range(min(2, T)):
            e = Xw.T @ vecs[:, i]
            n = np.linalg.norm(e)
            pats.append(e / n if n > 0 and vals[i] > rank_tol * max(vals[0], 0) else None)
    else:
        vals, vecs = np.linalg.eigh(Xw.T @ Xw / denom)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        pats = [vecs[:, 0], vecs[:, 1]]
    total = max(float(np.trace(Xw.T @ Xw)) / denom, 0.0) if S <= T else float((Xw * Xw).sum()) / denom
    if total <= 0 or pats[0] is None:
        raise IndexError_("degenerate covariance: no variance in the data")
    e1 = pats[0]
    e2 = pats[1] if len(pats) > 1 else None
    lam = np.maximum(vals[:2], 0.0) if vals.size >= 2 else np.array([max(vals[0], 0.0), 0.0])
    if e2 is None:
        # rank-one data: complete the pair with any unit vector orthogonal to e1
        k = int(np.argmin(np.abs(e1)))
        e2 = -e1[k] * e1
        e2[k] += 1.0
        e2 /= np.linalg.norm(e2)
        lam[1] = 0.0
    if e1[np.argmax(np.abs(e1))] < 0:
        e1 = -e1
    pcs = Xw @ np.stack([e1, e2]).T
    adv = _phase_advance(pcs)
    scale = float(np.abs(pcs).max()) ** 2 * T
    if abs(adv) > 1e-9 * max(scale, 1e-300):
        if adv < 0:
            e2 = -e2
    elif e2[np.argmax(np.abs(e2))] < 0:
        e2 = -e2
    patterns = np.stack([e1, e2])
    return EofBasis(patterns, lam, lam / total, sw)


# ---------------------------------------------------------------------------
# filtering and band means


def intraseasonal_filter(series, steps_per_day: int = STEPS_PER_DAY, days: int = FILTER_DAYS):
    """Subtract the mean of the previous ``days`` days from every sample.

    ``series`` is ``[T, ...]``; the first days*steps_per_day samples have no
    full history and are dropped, so the output has T - n samples.
    """
    x = np.asarray(series, dtype=np.float64)
    n = days * steps_per_day
    if x.shape[0] <= n:
        raise IndexError_(f"insufficient history: need more than {days} days of samples")
    c = np.concatenate([np.zeros_like(x[:1]), np.cumsum(x, axis=0)], axis=0)
    prior_mean = (c[n:-1] - c[:-1 - n]) / n
    return x[n:] - prior_mean


def band_mean(fields, grid: Grid, lat_min: float = -15.0, lat_max: float = 15.0) -> np.ndarray:
    """cos-weighted meridional mean over a latitude band: [..., lat, lon] -> [..., lon]."""
    sel = (grid.lat >= lat_min) & (grid.lat <= lat_max)
    if not sel.any():
        raise IndexError_(f"latitude band {lat_min}..{lat_max} absent from the grid")
    w = grid.weights[sel]
    f = np.asarray(fields, dtype=np.float64)[..., sel, :]
    return np.tensordot(f, w / w.sum(), axes=([-2], [0]))


def hovmoller(olr_anom, grid: Grid, lat_min: float = -15.0, lat_max: float = 15.0) -> np.ndarray:
    """[T, lon] band mean normalized by the standard deviation of the whole record."""
    m = band_mean(olr_anom, grid, lat_min, lat_max)
    sd = m.std()
    return m / sd if sd > 0 else m


# ---------------------------------------------------------------------------
# RMM-style index


@dataclass(frozen=True, eq=False)
class RmmBasis:
    eof: EofBasis
    norms: np.ndarray  # [3] per-field normalization
    pc_std: np.ndarray  # [2]
    nlon: int

    def combined(self, olr, u_low, u_high) -> np.ndarray:
        fields = [np.asarray(a, dtype=np.float64) for a in (olr, u_low, u_high)]
        if any(f.ndim != 2 or f.shape[1] != self.nlon for f in fields):
            raise IndexError_("the three fields must share the longitude axis of the basis")
        if len({f.shape[0] for f in fields}) != 1:
            raise IndexError_("the three fields must share the time axis")
        return np.concatenate([f / n for f, n in zip(fields, self.norms)], axis=1)

    def field_patterns(self, i: int) -> list[np.ndarray]:
        """Per-field anomalies that project to exactly 1 on EOF i (before standardization)."""
        p = self.eof.field_pattern(i)
        return [p[k * self.nlon:(k + 1) * self.nlon] * self.norms[k] for k in range(3)]


@dataclass(frozen=True, eq=False)
class RmmIndex:
    times: np.ndarray
    rmm1: np.ndarray
    rmm2: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray


def rmm_basis(olr, u_low, u_high) -> RmmBasis:
    """Combined EOF of three normalized band-mean intraseasonal anomaly fields ``[T, lon]``."""
    fields = [np.asarray(a, dtype=np.float64) for a in (olr, u_low, u_high)]
    nlon = fields[0].shape[1]
    norms = np.array([np.sqrt(f.var(axis=0).mean()) for f in fields])
    if np.any(norms <= 0):
        raise IndexError_("a field has zero variance over the basis period")
    proto = RmmBasis(None, norms, np.ones(2), nlon)
    combined = proto.combined(*fields)
    eof = eof_pair(combined)
    pcs = eof.project(combined)
    pc_std = pcs.std(axis=0)
    return RmmBasis(eof, norms, pc_std, nlon)


def rmm_phase(rmm1, rmm2):
    """Phase 1..8 from the octant of atan2(RMM2, RMM1); amplitude 0 maps to phase 0."""
    r1 = np.asarray(rmm1, dtype=np.float64)
    r2 = np.asarray(rmm2, dtype=np.float64)
    amp = np.hypot(r1, r2)
    theta = np.degrees(np.arctan2(r2, r1)) % 360.0
    octant = np.floor(theta / 45.0).astype(int) % 8
    phase = np.where(amp > 0, OCTANT_PHASE[octant], NO_PHASE)
    return phase, amp


def rmm_project(olr, u_low, u_high, basis: RmmBasis, times=None) -> RmmIndex:
    combined = basis.combined(olr, u_low, u_high)
    pcs = basis.eof.project(combined) / basis.pc_std
    phase, amp = rmm_phase(pcs[:, 0], pcs[:, 1])
    t = np.arange(combined.shape[0]) if times is None else np.asarray(times)
    return RmmIndex(t, pcs[:, 0], pcs[:, 1], amp, phase)


def bivariate_skill(*args) -> float:
    """Bivariate correlation of forecast and observed (RMM1, RMM2) pairs over inits.

    Call as ``bivariate_skill(forecast, observed)`` with two RmmIndex values
    paired by position, or ``bivariate_skill(f1, f2, o1, o2)`` with arrays.
    """
    if len(args) == 2:
        f, o = args
        f1, f2, o1, o2 = f.rmm1, f.rmm2, o.rmm1, o.rmm2
    elif len(args) == 4:
        f1, f2, o1, o2 = args
    else:
        raise TypeError("expected (forecast, observed) or (f1, f2, o1, o2)")
    f1, f2, o1, o2 = (np.asarray(a, dtype=np.float64) for a in (f1, f2, o1, o2))
    if f1.shape != o1.shape:
        raise IndexError_("forecast and observed indices are not paired")
    if f1.size == 0:
        raise IndexError_("no paired index values")
    num = (f1 * o1 + f2 * o2).sum()
    den = np.sqrt((f1 * f1 + f2 * f2).sum() * (o1 * o1 + o2 * o2).sum())
    return float(num / den) if den > 0 else float("nan")


# ---------------------------------------------------------------------------
# extratropical pattern indices


@dataclass(frozen=True, eq=False)
class PatternIndex:
    name: str
    times: np.ndarray
    values: np.ndarray
    raw: np.ndarray


@dataclass(frozen=True, eq=False)
class NaoModel:
    """Leading EOF of Z500 anomalies in a sector; positive index = low Z500 up north."""

    eof: EofBasis
    points: np.ndarray  # flat indices of the sector on the grid
    sign: float
    std: float

    def raw(self, z_anom) -> np.ndarray:
        z = np.asarray(z_anom, dtype=np.float64)
        flat = z.reshape(z.shape[:-2] + (-1,))[..., self.points]
        return self.sign * self.eof.project(flat)[..., 0]

    def index(self, z_anom, times=None) -> PatternIndex:
        raw = self.raw(z_anom)
        t = np.arange(raw.shape[0]) if times is None else np.asarray(times)
        return PatternIndex("NAO", t, raw / self.std, raw)

    def pattern(self, grid: Grid) -> np.ndarray:
        """Anomaly map equal to +1 standard deviation of the index."""
        out = np.zeros(grid.nlat * grid.nlon)
        out[self.points] = self.sign * self.std * self.eof.field_pattern(0)
        return out.reshape(grid.shape)


def fit_nao(z_anom, grid: Grid, region: Region = NAO_REGION) -> NaoModel:
    """Fit on ``z_anom[T, lat, lon]``; the record doubles as the standardization window."""
    mask = region.mask(grid)
    if mask.sum() < 2:
        raise IndexError_("NAO region absent from the grid")
    points = np.flatnonzero(mask.ravel())
    z = np.asarray(z_anom, dtype=np.float64)
    flat = z.reshape(z.shape[0], -1)[:, points]
    w = np.broadcast_to(grid.weights[:, None], grid.shape).ravel()[points]
    eof = eof_pair(flat, w)
    lat_pts = np.broadcast_to(grid.lat[:, None], grid.shape).ravel()[points]
    north = lat_pts >= np.median(lat_pts)
    loading = eof.field_pattern(0)[north].mean()
    sign = -1.0 if loading > 0 else 1.0
    raw = sign * eof.project(flat)[:, 0]
    std = float(np.sqrt((raw * raw).mean()))
    if std <= 0:
        raise IndexError_("NAO principal component has no variance")
    return NaoModel(eof, points, sign, std)


def nao_index(z_anom, grid: Grid, region: Region = NAO_REGION, times=None) -> PatternIndex:
    return fit_nao(z_anom, grid, region).index(z_anom, times)


def standardized_anomalies(anom, ref=None) -> np.ndarray:
    """Divide ``anom[T, lat, lon]`` by the per-point RMS over ``ref`` (default: itself)."""
    a = np.asarray(anom, dtype=np.float64)
    r = a if ref is None else np.asarray(ref, dtype=np.float64)
    sd = np.sqrt((r * r).mean(axis=0))
    return np.where(sd > 0, a / np.where(sd > 0, sd, 1.0), 0.0)


def load_centers(path=None) -> dict:
    """Teleconnection centre tables: name -> list of (lat, lon, sign, coefficient)."""
    if path is None:
        text = resources.files("toys2s.data").joinpath("teleconnections.json").read_text()
    else:
        text = open(path).read()
    doc = json.loads(text)
    if doc.get("schema_version") != 1:
        raise IndexError_("unsupported centre-table schema")
    return {name: [tuple(c) for c in spec["centers"]] for name, spec in doc["patterns"].items()}


def nearest_point(grid: Grid, lat: float, lon: float) -> tuple[int, int]:
    dlat = np.median(np.diff(grid.lat)) if grid.nlat > 1 else 180.0
    if lat < grid.lat[0] - dlat / 2 or lat > grid.lat[-1] + dlat / 2:
        raise IndexError_(f"centre ({lat}, {lon}) lies outside the grid")
    i = int(np.argmin(np.abs(grid.lat - lat)))
    d = np.abs((grid.lon - lon % 360.0 + 180.0) % 360.0 - 180.0)
    return i, int(np.argmin(d))


def point_pattern_raw(z_std, grid: Grid, centers: Sequence[tuple]) -> np.ndarray:
    z = np.asarray(z_std, dtype=np.float64)
    out = np.zeros(z.shape[:-2])
    for lat, lon, sign, coef in centers:
        i, j = nearest_point(grid, lat, lon)
        out = out + coef * sign * z[..., i, j]
    return out


def point_pattern_index(z_std, grid: Grid, centers: Sequence[tuple], name: str = "pattern",
                        ref_std: float | None = None, times=None) -> PatternIndex:
    """Signed, weighted sum of standardized anomalies at the centres, then standardized."""
    raw = point_pattern_raw(z_std, grid, centers)
    sd = float(np.sqrt((raw * raw).mean())) if ref_std is None else ref_std
    t = np.arange(raw.shape[0]) if times is None else np.asarray(times)
    return PatternIndex(name, t, raw / sd if sd > 0 else raw, raw)


# ---------------------------------------------------------------------------
# export


def index_csv(index: PatternIndex | RmmIndex) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(index, RmmIndex):
        w.writerow(["time", "value", "rmm1", "rmm2", "amplitude", "phase"])
        for t, a, b, amp, ph in zip(index.times, index.rmm1, index.rmm2, index.amplitude,
                                    index.phase):
            w.writerow([int(t), repr(float(amp)), repr(float(a)), repr(float(b)),
                        repr(float(amp)), int(ph)])
    else:
        w.writerow(["time", "value"])
        for t, v in zip(index.times, index.values):
            w.writerow([int(t), repr(float(v))])
    return buf.getvalue()
