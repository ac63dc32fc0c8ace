"""Deterministic and probabilistic skill scores.

Arrays handed to the scores put the forecast-observation pair axis (usually
initialization dates) first and the grid last.  Masked grid points are NaN
and are skipped by every regional reduction.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .gridstore import GLOBAL, STEPS_PER_DAY, Climatology, Grid, Region

METRICS = ("ACC", "TCC-map", "RMSE", "BSS", "RPSS")
STEPS_PER_WEEK = 7 * STEPS_PER_DAY
STEPS_PER_MONTH = 30 * STEPS_PER_DAY
DRY_THRESHOLD_MM = 1.0


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# deterministic scores


def acc_temporal(f, o) -> np.ndarray:
    """Temporal anomaly correlation per grid point across initializations.

    ``f`` and ``o`` are anomalies shaped ``[n_init, ...]``.  Points where
    either sum of squares vanishes, or any value is NaN, come back NaN.
    """
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if f.shape != o.shape:
        raise MetricError(f"forecast {f.shape} and observation {o.shape} shapes differ")
    if f.ndim == 0 or f.shape[0] == 0:
        raise MetricError("empty init set")
    if f.shape[0] < 2:
        raise MetricError("temporal correlation needs at least 2 init times")
    num = (f * o).sum(axis=0)
    den = np.sqrt((f * f).sum(axis=0) * (o * o).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(den > 0, out, np.nan)


def region_weights(grid: Grid, region: Region = GLOBAL) -> np.ndarray:
    inside = region.mask(grid)
    if not inside.any():
        raise MetricError(f"region {region.name!r} does not intersect the grid")
    return np.where(inside, grid.weights[:, None], 0.0)


def retained_area_fraction(field_map, grid: Grid, region: Region = GLOBAL) -> float:
    w = region_weights(grid, region)
    ok = np.isfinite(np.asarray(field_map, dtype=np.float64))
    return float((w * ok).sum() / w.sum())


def acc_aggregate(tcc_map, grid: Grid, region: Region = GLOBAL) -> float:
    """cos-latitude weighted mean of a TCC map over the unmasked points of ``region``."""
    m = np.asarray(tcc_map, dtype=np.float64)
    if m.shape != grid.shape:
        raise MetricError("map does not match the grid")
    w = region_weights(grid, region)
    ok = np.isfinite(m) & (w > 0)
    if not ok.any():
        raise MetricError("every point in the region is masked")
    return float((m[ok] * w[ok]).sum() / w[ok].sum())


def acc_spatial(f, o, grid: Grid, region: Region = GLOBAL) -> float:
    """Case-wise spatial ACC averaged over cases (alternative aggregation)."""
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if f.shape != o.shape or f.shape[-2:] != grid.shape:
        raise MetricError("shape mismatch")
    w = region_weights(grid, region)
    ok = np.isfinite(f) & np.isfinite(o) & (w > 0)
    wf = np.where(ok, f, 0.0)
    wo = np.where(ok, o, 0.0)
    ww = np.where(ok, w, 0.0)
    num = (ww * wf * wo).sum(axis=(-2, -1))
    den = np.sqrt((ww * wf * wf).sum(axis=(-2, -1)) * (ww * wo * wo).sum(axis=(-2, -1)))
    with np.errstate(invalid="ignore", divide="ignore"):
        per_case = np.where(den > 0, num / den, np.nan)
    return float(np.nanmean(per_case))


def rmse_weighted(f, o, grid: Grid, region: Region = GLOBAL) -> float:
    """Root of the cos-weighted mean squared error over points and inits."""
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if f.shape != o.shape:
        raise MetricError("forecast and observation shapes differ")
    if f.shape[-2:] != grid.shape:
        raise MetricError("fields do not match the grid")
    w = np.broadcast_to(region_weights(grid, region), f.shape)
    ok = np.isfinite(f) & np.isfinite(o) & (w > 0)
    if not ok.any():
        raise MetricError("no unmasked points")
    d = f[ok] - o[ok]
    return float(math.sqrt((w[ok] * d * d).sum() / w[ok].sum()))


# ---------------------------------------------------------------------------
# probabilistic scores


@dataclass(frozen=True, eq=False)
class ProbForecast:
    """Category probabilities on the last axis: forecast, climatology, observed one-hot."""

    pf: np.ndarray
    pc: np.ndarray
    po: np.ndarray

    def __post_init__(self):
        pf = np.asarray(self.pf, dtype=np.float64)
        pc = np.broadcast_to(np.asarray(self.pc, dtype=np.float64), pf.shape)
        po = np.asarray(self.po, dtype=np.float64)
        if po.shape != pf.shape:
            raise MetricError("forecast and observed probability shapes differ")
        for name, p in (("P_f", pf), ("P_c", pc), ("P_o", po)):
            ok = np.isfinite(p).all(axis=-1)
            s = p.sum(axis=-1)
            if np.any(p[ok] < 0) or np.any(np.abs(s[ok] - 1.0) > 1e-6):
                raise MetricError(f"{name} is not a probability vector")
        okp = np.isfinite(po).all(axis=-1)
        if np.any((po[okp] != 0) & (po[okp] != 1)):
            raise MetricError("P_o must be one-hot")
        object.__setattr__(self, "pf", pf)
        object.__setattr__(self, "pc", pc)
        object.__setattr__(self, "po", po)

    @property
    def n_categories(self) -> int:
        return self.pf.shape[-1]


def categorize(values, lower, upper) -> np.ndarray:
    """Tercile category 0/1/2; a value equal to a boundary goes to the lower category."""
    values = np.asarray(values, dtype=np.float64)
    cat = np.where(values <= lower, 0, np.where(values <= upper, 1, 2))
    return cat


def tercile_probs(members, observed, lower, upper, obs_lower=None, obs_upper=None) -> ProbForecast:
    """Tercile probabilities from an ensemble ``members[M, ...]``.

    Forecast categories use (lower, upper); the observation uses
    (obs_lower, obs_upper), defaulting to the same thresholds.  NaN
    thresholds or values propagate as NaN probabilities.
    """
    members = np.asarray(members, dtype=np.float64)
    if lower is None or upper is None:
        raise MetricError("tercile boundaries missing")
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    obs_lower = lower if obs_lower is None else np.asarray(obs_lower, dtype=np.float64)
    obs_upper = upper if obs_upper is None else np.asarray(obs_upper, dtype=np.float64)
    m = members.shape[0]
    cats = categorize(members, lower, upper)
    p0 = (cats == 0).sum(axis=0) / m
    p1 = (cats == 1).sum(axis=0) / m
    # closing category by complement so the three probabilities sum to exactly 1
    pf = np.stack([p0, p1, 1.0 - (p0 + p1)], axis=-1)
    ocat = categorize(observed, obs_lower, obs_upper)
    po = np.stack([(ocat == k) for k in range(3)], axis=-1).astype(np.float64)
    bad_f = ~(np.isfinite(members).all(axis=0) & np.isfinite(lower) & np.isfinite(upper))
    bad_o = ~(np.isfinite(observed) & np.isfinite(obs_lower) & np.isfinite(obs_upper))
    bad = np.broadcast_to(bad_f | bad_o, pf.shape[:-1])
    pf = np.where(bad[..., None], np.nan, pf)
    po = np.where(bad[..., None], np.nan, po)
    pc = np.full(3, 1.0 / 3.0)
    return ProbForecast(pf, pc, po)


def _rps(p, po) -> np.ndarray:
    d = np.cumsum(p, axis=-1) - np.cumsum(po, axis=-1)
    return (d * d).sum(axis=-1)


def rps(pf: ProbForecast) -> np.ndarray:
    """Ranked probability score of the forecast over cumulative categories."""
    return _rps(pf.pf, pf.po)


def rps_clim(pf: ProbForecast) -> np.ndarray:
    return _rps(pf.pc, pf.po)


def _pair_mean(scores, weights) -> float:
    s = np.asarray(scores, dtype=np.float64)
    w = np.ones_like(s) if weights is None else np.broadcast_to(weights, s.shape)
    ok = np.isfinite(s) & (w > 0)
    if not ok.any():
        return float("nan")
    return float((s[ok] * w[ok]).sum() / w[ok].sum())


def skill_score(score_f, score_c, weights=None) -> float:
    """1 - <score_f>/<score_c>; NaN when the reference average is zero."""
    sf = np.asarray(score_f, dtype=np.float64)
    sc = np.asarray(score_c, dtype=np.float64)
    ok = np.isfinite(sf) & np.isfinite(sc)
    sf = np.where(ok, sf, np.nan)
    sc = np.where(ok, sc, np.nan)
    mf, mc = _pair_mean(sf, weights), _pair_mean(sc, weights)
    if not np.isfinite(mc) or mc == 0.0:
        return float("nan")
    return 1.0 - mf / mc


def rpss(pairs: ProbForecast | Sequence[ProbForecast], weights=None) -> float:
    """Ranked probability skill score averaged over all pairs."""
    if isinstance(pairs, ProbForecast):
        f, c = rps(pairs), rps_clim(pairs)
    else:
        if len(pairs) == 0:
            raise MetricError("rpss needs at least one forecast-observation pair")
        f = np.concatenate([np.ravel(rps(p)) for p in pairs])
        c = np.concatenate([np.ravel(rps_clim(p)) for p in pairs])
    return skill_score(f, c, weights)


def brier_score(prob, outcome) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    return (prob - np.asarray(outcome, dtype=np.float64)) ** 2


def bss(event_probs, outcomes, clim_prob=0.1, weights=None) -> float:
    """Brier skill score of event probabilities against a constant climatological rate."""
    p = np.asarray(event_probs, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.float64)
    if p.shape != y.shape:
        raise MetricError("probability and outcome shapes differ")
    bs_c = brier_score(np.broadcast_to(clim_prob, p.shape), y)
    bs_c = np.where(np.isfinite(p), bs_c, np.nan)
    return skill_score(brier_score(p, y), bs_c, weights)


def exceedance_probs(members, threshold) -> np.ndarray:
    """Member fraction strictly above ``threshold``; NaN where inputs are NaN."""
    members = np.asarray(members, dtype=np.float64)
    threshold = np.asarray(threshold, dtype=np.float64)
    p = (members > threshold).mean(axis=0)
    bad = ~(np.isfinite(members).all(axis=0) & np.isfinite(threshold))
    return np.where(bad, np.nan, p)


# ---------------------------------------------------------------------------
# windows and masks


def window_steps(window: str, which) -> tuple[int, int]:
    """Inclusive lead-step range of a window; step 0 is the initial time.

    ``which`` is a 1-based index, or a (first, last) pair of indices whose
    union is taken.  Week w spans steps 28(w-1)+1 .. 28w.
    """
    size = {"weekly": STEPS_PER_WEEK, "biweekly": 2 * STEPS_PER_WEEK,
            "monthly": STEPS_PER_MONTH}.get(window)
    if size is None:
        raise MetricError(f"unknown window {window!r}")
    first, last = (which, which) if np.isscalar(which) else tuple(which)
    if first < 1 or last < first:
        raise MetricError(f"bad window index {which!r}")
    return size * (first - 1) + 1, size * last


def window_label(window: str, which) -> str:
    first, last = (which, which) if np.isscalar(which) else tuple(which)
    prefix = {"weekly": "week", "biweekly": "biweek", "monthly": "month"}[window]
    return f"{prefix}{first}" if first == last else f"{prefix}{first}-{last}"


def window_aggregate(series, window: str, which, accumulate: bool = False, axis: int = 0):
    """Mean (or sum, for accumulated quantities) of ``series`` over a lead window."""
    series = np.asarray(series, dtype=np.float64)
    first, last = window_steps(window, which)
    if series.shape[axis] <= last:
        raise MetricError(f"incomplete window: need lead step {last}, have {series.shape[axis] - 1}")
    sl = [slice(None)] * series.ndim
    sl[axis] = slice(first, last + 1)
    chunk = series[tuple(sl)]
    return chunk.sum(axis=axis) if accumulate else chunk.mean(axis=axis)


def dry_mask(clim: Climatology, variable: str = "tp", threshold: float = DRY_THRESHOLD_MM,
             precip_like: Iterable[str] = ("tp",)) -> np.ndarray:
    """True where climatological biweekly accumulation is below ``threshold``.

    ``clim`` must be a climatology of biweekly totals (see
    gridstore.rolling_window); the calendar-mean total decides the mask.
    """
    if variable not in set(precip_like):
        raise MetricError(f"{variable!r} is not precipitation-like")
    if clim.attrs.get("window_steps") not in (None, 2 * STEPS_PER_WEEK):
        raise MetricError("dry mask needs a biweekly-total climatology")
    m = clim.mean[clim.index(variable)].astype(np.float64)
    totals = m.reshape((-1,) + clim.grid.shape).mean(axis=0)
    return dry_mask_from_totals(totals, threshold)


def dry_mask_from_totals(totals, threshold: float = DRY_THRESHOLD_MM) -> np.ndarray:
    return np.asarray(totals, dtype=np.float64) < threshold


# ---------------------------------------------------------------------------
# skill report


REPORT_HEADER = ("variable", "metric", "climatology_kind", "lead_window", "region", "value",
                 "n_pairs", "retained_area_fraction")


@dataclass(frozen=True)
class SkillEntry:
    variable: str
    metric: str
    climatology_kind: str
    lead_window: str
    region: str
    value: float
    n_pairs: int
    retained_area_fraction: float

    def key(self) -> tuple:
        return (self.variable, self.metric, self.climatology_kind, self.lead_window, self.region)


@dataclass
class SkillReport:
    entries: list[SkillEntry] = field(default_factory=list)
    maps: dict[tuple, np.ndarray] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    def add(self, entry: SkillEntry, skill_map: np.ndarray | None = None) -> None:
        if entry.metric not in METRICS:
            raise MetricError(f"unknown metric {entry.metric!r}")
        if entry.climatology_kind not in ("observed", "model", "none"):
            raise MetricError("climatology kind must be recorded")
        self.entries.append(entry)
        if skill_map is not None:
            self.maps[entry.key()] = skill_map

    def value(self, variable, metric, kind, lead_window, region="global") -> float:
        for e in self.entries:
            if e.key() == (variable, metric, kind, lead_window, region):
                return e.value
        raise KeyError((variable, metric, kind, lead_window, region))

    def sorted_entries(self) -> list[SkillEntry]:
        return sorted(self.entries, key=lambda e: e.key())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for e in self.sorted_entries():
            w.writerow([e.variable, e.metric, e.climatology_kind, e.lead_window, e.region,
                        repr(float(e.value)), e.n_pairs, repr(float(e.retained_area_fraction))])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text: str) -> "SkillReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != REPORT_HEADER:
            raise MetricError("unexpected skill report header")
        rep = cls()
        for r in rows[1:]:
            rep.entries.append(SkillEntry(r[0], r[1], r[2], r[3], r[4], float(r[5]), int(r[6]),
                                          float(r[7])))
        return rep

    @classmethod
    def read_csv(cls, path) -> "SkillReport":
        return cls.from_csv(Path(path).read_text())
