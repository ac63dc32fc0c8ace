"""Experiment orchestration: hindcast campaigns, verification, error growth, ablation, reports.

A forecast system (surrogate ensemble, persistence, climatology) maps an
initial time to member window aggregates; one verifier turns those into
skill entries under either climatology kind, so baselines and the model
share a single scoring path.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ensemble as ens
from . import forecaster as fc
from . import metrics as mt
from .gridstore import (ACCUMULATED_VARIABLES, DAYS_PER_YEAR, GLOBAL, HOURS_PER_DAY, HOURS_PER_YEAR,
                        STEP_HOURS, STEPS_PER_DAY, Climatology, EnsembleHindcast, FieldArchive, Region,
                        TROPICS, calendar_key, compute_climatology, compute_model_climatology,
                        load_archive, load_climatology, rolling_window, write_archive,
                        write_climatology, year_of)
from .toyearth import ToyParams, gen_truth

log = logging.getLogger("toys2s")

KINDS = ("observed", "model")
REGIONS = {
    "global": GLOBAL,
    "tropics": TROPICS,
    "nh_extratropics": Region(30.0, 90.0, 0.0, 360.0, "nh_extratropics"),
    "sh_extratropics": Region(-90.0, -30.0, 0.0, 360.0, "sh_extratropics"),
}
ABLATION_LABELS = ("V1", "AOL", "W2S", "W2S+IC", "W2S+IC+model")
EVENT_QUANTILE = 0.9


class ConfigError(ValueError):
    pass


class PartialResults(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    truth: str | None = None  # existing archive; generated from ``toy`` when None
    truth_years: int = 10
    truth_seed: int = 0
    toy: dict = field(default_factory=dict)
    train_years: tuple[int, int] = (0, 7)
    test_years: tuple[int, int] = (8, 9)
    init_every_days: int = 5
    max_inits: int | None = None
    members: int = 8
    lead_steps: int = 168
    mode: str = "W2S"
    perturbation: dict = field(default_factory=dict)
    climatology: tuple[str, ...] = KINDS
    clim_members: int | None = None  # members per model-climatology hindcast (default: members)
    clim_max_inits: int | None = None
    halfwidth: int = 7
    regions: tuple[str, ...] = ("global", "tropics", "nh_extratropics", "sh_extratropics")
    variables: tuple[str, ...] | None = None  # verified variables (default: all model variables)
    min_member_fraction: float = 0.8
    train: dict = field(default_factory=dict)
    error_growth_steps: int = 360
    error_growth_inits: int = 20
    ablation_inits: int = 20
    seed: int = 0
    out: str = "run"

    def __post_init__(self):
        for name in ("train_years", "test_years", "climatology", "regions"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.variables is not None:
            object.__setattr__(self, "variables", tuple(self.variables))
        a, b = self.train_years
        c, d = self.test_years
        if a > b or c > d:
            raise ConfigError("year ranges must be (first, last) with first <= last")
        if not (b < c or d < a):
            raise ConfigError("train and test periods overlap")
        if self.members < 1 or self.lead_steps < 1 or self.init_every_days < 1:
            raise ConfigError("members, lead_steps and init_every_days must be positive")
        if self.mode not in fc.MODES:
            raise ConfigError(f"unknown ablation mode {self.mode!r}")
        bad = set(self.climatology) - set(KINDS)
        if bad or not self.climatology:
            raise ConfigError(f"climatology kinds must be drawn from {KINDS}")
        bad = set(self.regions) - set(REGIONS)
        if bad:
            raise ConfigError(f"unknown regions {sorted(bad)}")
        if not (0.0 < self.min_member_fraction <= 1.0):
            raise ConfigError("min_member_fraction must lie in (0, 1]")
        try:
            self.perturbation_config()
            self.train_config()
            self.toy_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def toy_params(self) -> ToyParams:
        return ToyParams.from_dict(self.toy)

    def perturbation_config(self, **overrides) -> ens.PerturbationConfig:
        d = {"seed": self.seed, **self.perturbation, **overrides}
        return ens.PerturbationConfig(**d)

    def train_config(self, **overrides) -> fc.TrainConfig:
        d = {"seed": self.seed, "mode": self.mode, "train_years": self.train_years,
             **self.train, **overrides}
        return fc.TrainConfig(**d)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


# ---------------------------------------------------------------------------
# lead windows


@dataclass(frozen=True)
class LeadWindow:
    """Inclusive lead-step range; ``kind`` 'step' means a single lead step."""

    kind: str
    which: int
    first: int
    last: int

    @property
    def label(self) -> str:
        return f"lead{self.first}" if self.kind == "step" else mt.window_label(self.kind, self.which)

    @property
    def n_steps(self) -> int:
        return self.last - self.first + 1

    @property
    def clim_offset_steps(self) -> int:
        # rolling climatology entry t covers t+1..t+n; single steps use the raw climatology
        return self.first if self.kind == "step" else self.first - 1


def lead_windows(kind: str, lead_steps: int, which: Iterable[int] | None = None) -> list[LeadWindow]:
    if kind == "step":
        steps = list(which) if which is not None else [0]
        if any(s < 0 or s > lead_steps for s in steps):
            raise ConfigError("lead step outside the hindcast range")
        return [LeadWindow("step", s, s, s) for s in steps]
    out = []
    w = 1
    while True:
        first, last = mt.window_steps(kind, w)
        if last > lead_steps:
            break
        if which is None or w in set(which):
            out.append(LeadWindow(kind, w, first, last))
        w += 1
    return out


def default_windows(lead_steps: int) -> dict[str, list[LeadWindow]]:
    out = {"step": lead_windows("step", lead_steps, [0])}
    for kind in ("weekly", "biweekly"):
        ws = lead_windows(kind, lead_steps)
        if ws:
            out[kind] = ws
    return out


def aggregate_windows(series, variables: Sequence[str], windows: Sequence[LeadWindow],
                      lead_axis: int) -> np.ndarray:
    """Window aggregates of ``series`` along ``lead_axis`` (variable axis first).

    Accumulated variables are summed over the window, the rest averaged; the
    window axis replaces the lead axis.
    """
    x = np.asarray(series)
    parts = []
    for w in windows:
        sl = [slice(None)] * x.ndim
        sl[lead_axis] = slice(w.first, w.last + 1)
        parts.append(x[tuple(sl)].sum(axis=lead_axis, dtype=np.float64))
    sums = np.stack(parts, axis=lead_axis)
    n = np.array([w.n_steps for w in windows], dtype=np.float64)
    shape = [1] * x.ndim
    shape[lead_axis] = len(windows)
    means = sums / n.reshape(shape)
    acc = np.array([v in ACCUMULATED_VARIABLES for v in variables])
    acc = acc.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(acc, sums, means)


# ---------------------------------------------------------------------------
# climatology bundles


@dataclass
class ClimSet:
    """Observed climatologies per window kind (raw 6-hourly for 'step') and
    optional model climatologies keyed by init and window."""

    observed: dict[str, Climatology]
    model: dict[str, Climatology] = field(default_factory=dict)

    def observed_lookup(self, kind: str, variables, init_time: int, windows: Sequence[LeadWindow]):
        clim = self.observed[kind]
        vidx = [clim.index(v) for v in variables]
        times = init_time + STEP_HOURS * np.array([w.clim_offset_steps for w in windows])
        kidx = clim.key_index(calendar_key(times))
        mean = clim.mean[vidx][:, kidx]
        q = clim.quantiles[vidx][:, :, kidx]  # [var, q, window, lat, lon]
        return _clim_parts(clim, mean, q)

    def model_lookup(self, kind: str, variables, init_time: int, windows: Sequence[LeadWindow]):
        clim = self.model[kind]
        vidx = [clim.index(v) for v in variables]
        k = int(clim.key_index([calendar_key(init_time)])[0])
        starts = STEP_HOURS * np.array([w.clim_offset_steps for w in windows])
        lidx = [int(np.flatnonzero(clim.lead_hours == s)[0]) for s in starts]
        mean = clim.mean[vidx][:, k][:, lidx]
        q = clim.quantiles[vidx][:, :, k][:, :, lidx]
        return _clim_parts(clim, mean, q)


def _clim_parts(clim: Climatology, mean, q):
    levels = clim.quantile_levels

    def level(x):
        for i, l in enumerate(levels):
            if abs(l - x) < 1e-9:
                return q[:, i].astype(np.float64)
        raise mt.MetricError(f"climatology lacks quantile {x}")

    return (mean.astype(np.float64), level(1.0 / 3.0), level(2.0 / 3.0), level(EVENT_QUANTILE))


def observed_climatologies(truth: FieldArchive, years, windows: dict[str, list[LeadWindow]],
                           variables, halfwidth: int = 7) -> dict[str, Climatology]:
    sub = truth.select_variables(variables)
    out = {}
    for kind, ws in windows.items():
        if kind == "step":
            clim = compute_climatology(sub, years, halfwidth)
        else:
            n = ws[0].n_steps
            clim = compute_climatology(rolling_window(sub, n), years, halfwidth)
            clim = replace(clim, attrs={**clim.attrs, "window_steps": n})
        out[kind] = clim
    return out


def biweekly_dry_mask(truth: FieldArchive, years, halfwidth: int = 7) -> np.ndarray | None:
    """Static mask from the calendar-mean biweekly precipitation-analog total."""
    if "tp" not in truth.variables:
        return None
    clim = compute_climatology(rolling_window(truth.select_variables(["tp"]), 2 * mt.STEPS_PER_WEEK),
                               years, halfwidth, quantiles=())
    clim = replace(clim, attrs={**clim.attrs, "window_steps": 2 * mt.STEPS_PER_WEEK})
    return mt.dry_mask(clim)


def anomaly_sigma(truth: FieldArchive, raw_clim: Climatology, years, variables) -> dict[str, float]:
    """Area-weighted RMS of 6-hourly anomalies per variable over ``years``."""
    sub = truth.select_years(*years)
    kidx = raw_clim.key_index(calendar_key(sub.times))
    w = sub.grid.weights[:, None] * np.ones(sub.grid.shape)
    out = {}
    for v in variables:
        a = sub.field(v).astype(np.float64) - raw_clim.mean[raw_clim.index(v)][kidx]
        var = (a * a).mean(axis=0)
        out[v] = float(math.sqrt((var * w).sum() / w.sum()))
    return out


# ---------------------------------------------------------------------------
# forecast systems


@dataclass
class WindowMembers:
    """Per-init window aggregates ``values[var, member, window, lat, lon]`` per window kind."""

    init_time: int
    values: dict[str, np.ndarray]
    n_ok: int
    n_total: int
    # optional explicit (tercile probs [..., 3], event prob) per window kind,
    # used instead of member counting
    probs: dict[str, tuple] | None = None


class ForecastSystem:
    name = "system"
    kinds: tuple[str, ...] = KINDS

    def __init__(self, variables: Sequence[str]):
        self.variables = tuple(variables)

    def hindcast(self, truth: FieldArchive, init_time: int, n_steps: int) -> EnsembleHindcast:
        raise NotImplementedError

    def window_members(self, truth: FieldArchive, init_time: int, n_steps: int,
                       windows: dict[str, list[LeadWindow]], hc: EnsembleHindcast | None = None,
                       clims: ClimSet | None = None) -> WindowMembers:
        if hc is None:
            hc = self.hindcast(truth, init_time, n_steps)
        return members_from_hindcast(hc, self.variables, windows)


def members_from_hindcast(hc: EnsembleHindcast, variables, windows) -> WindowMembers:
    vidx = [hc.index(v) for v in variables]
    v = hc.values[vidx]
    ok = np.isfinite(v).reshape(v.shape[0], v.shape[1], -1).all(axis=(0, 2))
    v = v[:, ok]
    vals = {k: aggregate_windows(v, variables, ws, lead_axis=2) for k, ws in windows.items()}
    return WindowMembers(hc.init_time, vals, int(ok.sum()), hc.n_members)


def truth_snapshot(truth: FieldArchive, init_time: int, variables) -> np.ndarray:
    i = int(truth.time_index([init_time])[0])
    return truth.values[[truth.index(v) for v in variables], i].astype(np.float64)


def truth_segment(truth: FieldArchive, init_time: int, n_steps: int, variables) -> np.ndarray:
    """Truth ``[var, lead, lat, lon]`` for leads 0..n_steps."""
    i = int(truth.time_index([init_time])[0])
    if i + n_steps >= truth.n_times:
        raise mt.MetricError("verification period runs past the end of the truth archive")
    return truth.values[[truth.index(v) for v in variables], i:i + n_steps + 1].astype(np.float64)


class SurrogateSystem(ForecastSystem):
    name = "surrogate"

    def __init__(self, model: fc.SurrogateModel, config: ens.PerturbationConfig, members: int,
                 sigma: dict[str, float]):
        super().__init__(model.variables)
        self.model, self.config, self.members, self.sigma = model, config, members, sigma
        self.specs: dict[int, list] = {}

    def hindcast(self, truth, init_time, n_steps):
        snap = truth_snapshot(truth, init_time, self.model.variables)
        hc, specs = ens.generate_members(self.model, snap, init_time, truth.grid, self.members,
                                         n_steps, self.config, self.sigma)
        self.specs[int(init_time)] = specs
        return hc


class PersistenceSystem(ForecastSystem):
    """The initial state held fixed over all leads (one member)."""

    name = "persistence"
    kinds = ("observed",)

    def hindcast(self, truth, init_time, n_steps):
        snap = truth_snapshot(truth, init_time, self.variables)
        values = np.broadcast_to(snap[:, None, None], (len(self.variables), 1, n_steps + 1)
                                 + snap.shape[1:])
        return EnsembleHindcast(truth.grid, self.variables, init_time,
                                STEP_HOURS * np.arange(n_steps + 1), values)


class ClimatologySystem(ForecastSystem):
    """Climatological probability forecast: 1/3 per tercile, 0.1 for the event.

    The probabilities are stated directly rather than counted from members,
    since tied tercile thresholds (a dry point mass, say) leave no member
    placement that yields equal thirds.  The single member is the observed
    climatological mean, so the forecast anomaly is zero.
    """

    name = "climatology"
    kinds = ("observed",)

    def window_members(self, truth, init_time, n_steps, windows, hc=None, clims=None):
        if clims is None:
            raise ValueError("the climatology baseline needs observed climatologies")
        vals, probs = {}, {}
        for kind, ws in windows.items():
            mean = clims.observed_lookup(kind, self.variables, init_time, ws)[0]
            vals[kind] = mean[:, None]
            probs[kind] = (np.full(mean.shape + (3,), 1.0 / 3.0),
                           np.full(mean.shape, 1.0 - EVENT_QUANTILE))
        return WindowMembers(int(init_time), vals, 1, 1, probs)


# ---------------------------------------------------------------------------
# streaming verification


@dataclass
class _Products:
    fa: list = field(default_factory=list)  # ensemble-mean anomaly
    oa: list = field(default_factory=list)  # observed anomaly
    rps_f: list = field(default_factory=list)
    rps_c: list = field(default_factory=list)
    bs_f: list = field(default_factory=list)
    bs_c: list = field(default_factory=list)


class Verifier:
    """Accumulates per-init reductions, then scores them in one pass.

    Observations are always taken as anomalies from the observed climatology;
    the forecast anomaly and forecast category thresholds come from the
    requested climatology kind.
    """

    def __init__(self, truth: FieldArchive, variables, windows: dict[str, list[LeadWindow]],
                 clims: ClimSet, kinds: Sequence[str], regions: Sequence[str] = ("global",),
                 dry_mask: np.ndarray | None = None, min_member_fraction: float = 0.8):
        self.truth, self.variables, self.windows = truth, tuple(variables), windows
        self.clims, self.kinds, self.regions = clims, tuple(kinds), tuple(regions)
        self.dry_mask = dry_mask
        self.min_member_fraction = min_member_fraction
        self.grid = truth.grid
        self.max_lead = max(w.last for ws in windows.values() for w in ws)
        self.products = {(k, kind): _Products() for k in windows for kind in self.kinds}
        self.incomplete: list[int] = []
        self.n_inits = 0

    def reduce(self, wm: WindowMembers, obs: dict | None = None) -> dict:
        """Per-init reduction; pure, so it can run on worker threads."""
        out = {}
        if wm.n_ok < self.min_member_fraction * wm.n_total or wm.n_ok == 0:
            return {"incomplete": True}
        seg = truth_segment(self.truth, wm.init_time, self.max_lead, self.variables) if obs is None else None
        for k, ws in self.windows.items():
            o = obs[k] if obs is not None else aggregate_windows(seg, self.variables, ws, lead_axis=1)
            om, olo, oup, oq9 = self.clims.observed_lookup(k, self.variables, wm.init_time, ws)
            oa = o - om
            members = np.moveaxis(wm.values[k], 1, 0)  # [M, var, window, lat, lon]
            y = np.where(np.isfinite(o), (o > oq9).astype(np.float64), np.nan)
            for kind in self.kinds:
                if kind == "observed":
                    cm, lo, up, q9 = om, olo, oup, oq9
                else:
                    cm, lo, up, q9 = self.clims.model_lookup(k, self.variables, wm.init_time, ws)
                fa = members.mean(axis=0) - cm
                pf = mt.tercile_probs(members, o, lo, up, olo, oup)
                p = mt.exceedance_probs(members, q9)
                if wm.probs is not None:
                    pt, pe = wm.probs[k]
                    pf = mt.ProbForecast(np.where(np.isnan(pf.pf), np.nan, pt), pf.pc, pf.po)
                    p = np.where(np.isnan(p), np.nan, pe)
                rf, rc = mt.rps(pf), mt.rps_clim(pf)
                bf = mt.brier_score(p, y)
                bc = np.where(np.isfinite(p), mt.brier_score(np.full_like(y, 1.0 - EVENT_QUANTILE), y),
                              np.nan)
                out[(k, kind)] = (fa, oa, rf, rc, bf, bc)
        return out

    def add(self, init_time: int, reduced: dict) -> None:
        self.n_inits += 1
        if reduced.get("incomplete"):
            self.incomplete.append(int(init_time))
            return
        for key, (fa, oa, rf, rc, bf, bc) in reduced.items():
            p = self.products[key]
            p.fa.append(fa)
            p.oa.append(oa)
            p.rps_f.append(rf)
            p.rps_c.append(rc)
            p.bs_f.append(bf)
            p.bs_c.append(bc)

    def report(self, report: mt.SkillReport | None = None) -> mt.SkillReport:
        report = report or mt.SkillReport()
        grid = self.grid
        w2d = grid.weights[:, None] * np.ones(grid.shape)
        for (k, kind), p in sorted(self.products.items()):
            if not p.fa:
                continue
            fa, oa = np.stack(p.fa), np.stack(p.oa)  # [init, var, window, lat, lon]
            rf, rc = np.stack(p.rps_f), np.stack(p.rps_c)
            bf, bc = np.stack(p.bs_f), np.stack(p.bs_c)
            for vi, var in enumerate(self.variables):
                if var == "tp" and self.dry_mask is not None:
                    rf[:, vi, :, self.dry_mask] = np.nan
                    rc[:, vi, :, self.dry_mask] = np.nan
                for wi, win in enumerate(self.windows[k]):
                    f, o = fa[:, vi, wi], oa[:, vi, wi]
                    tcc = mt.acc_temporal(f, o) if f.shape[0] >= 2 else np.full(grid.shape, np.nan)
                    maps = {
                        "ACC": tcc,
                        "RPSS": _score_map(rf[:, vi, wi], rc[:, vi, wi]),
                        "BSS": _score_map(bf[:, vi, wi], bc[:, vi, wi]),
                    }
                    for rname in self.regions:
                        region = REGIONS[rname]
                        inside = region.mask(grid)
                        if not inside.any():
                            for m in ("ACC", "RMSE", "RPSS", "BSS"):
                                report.add(mt.SkillEntry(var, m, kind, win.label, rname,
                                                         float("nan"), 0, 0.0))
                            continue
                        rw = np.where(inside, w2d, 0.0)
                        try:
                            acc = mt.acc_aggregate(tcc, grid, region)
                        except mt.MetricError:
                            acc = float("nan")
                        report.add(mt.SkillEntry(var, "ACC", kind, win.label, rname, acc,
                                                 int(f.shape[0]),
                                                 mt.retained_area_fraction(tcc, grid, region)),
                                   tcc if rname == "global" else None)
                        try:
                            rmse = mt.rmse_weighted(f, o, grid, region)
                        except mt.MetricError:
                            rmse = float("nan")
                        report.add(mt.SkillEntry(var, "RMSE", kind, win.label, rname, rmse,
                                                 int(f.shape[0]), 1.0))
                        for m, sf, sc in (("RPSS", rf, rc), ("BSS", bf, bc)):
                            a, b = sf[:, vi, wi], sc[:, vi, wi]
                            wts = np.broadcast_to(rw, a.shape)
                            val = mt.skill_score(a, b, wts)
                            n = int((np.isfinite(a) & np.isfinite(b) & (wts > 0)).sum())
                            report.add(mt.SkillEntry(var, m, kind, win.label, rname, val, n,
                                                     mt.retained_area_fraction(maps[m], grid, region)),
                                       maps[m] if rname == "global" else None)
        if self.incomplete:
            report.flags["incomplete_inits"] = " ".join(str(t) for t in self.incomplete)
        return report


def _score_map(sf, sc) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        num = np.nanmean(sf, axis=0) if np.isfinite(sf).any() else np.full(sf.shape[1:], np.nan)
        den = np.nanmean(sc, axis=0) if np.isfinite(sc).any() else np.full(sc.shape[1:], np.nan)
        return np.where(den > 0, 1.0 - num / den, np.nan)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map; each item is computed identically whatever the worker count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def verify_system(system: ForecastSystem, truth: FieldArchive, inits: Sequence[int], n_steps: int,
                  windows: dict[str, list[LeadWindow]], clims: ClimSet, kinds=None,
                  regions=("global",), dry_mask=None, threads: int = 1,
                  min_member_fraction: float = 0.8,
                  hindcasts: dict[int, EnsembleHindcast] | None = None,
                  on_hindcast: Callable | None = None) -> mt.SkillReport:
    kinds = tuple(k for k in (kinds or system.kinds) if k in system.kinds)
    ver = Verifier(truth, system.variables, windows, clims, kinds, regions, dry_mask,
                   min_member_fraction)

    def one(t):
        hc = hindcasts.get(int(t)) if hindcasts is not None else None
        if hc is None and not isinstance(system, ClimatologySystem):
            hc = system.hindcast(truth, int(t), n_steps)
            if on_hindcast is not None:
                on_hindcast(hc)
        wm = system.window_members(truth, int(t), n_steps, windows, hc=hc, clims=clims)
        return ver.reduce(wm)

    for t, red in zip(inits, parallel_map(one, list(inits), threads)):
        ver.add(int(t), red)
    return ver.report()


# ---------------------------------------------------------------------------
# campaign plumbing


def init_schedule(truth: FieldArchive, years, every_days: int, lead_steps: int,
                  max_inits: int | None = None, slot: int = 0) -> np.ndarray:
    """Init times every ``every_days`` days of ``years`` with a complete verification span."""
    first, last = years
    start = first * HOURS_PER_YEAR + slot * STEP_HOURS
    stop = (last + 1) * HOURS_PER_YEAR
    inits = np.arange(start, stop, every_days * HOURS_PER_DAY, dtype=np.int64)
    end = truth.times[-1]
    inits = inits[(inits >= truth.times[0]) & (inits + lead_steps * STEP_HOURS <= end)]
    if max_inits is not None:
        inits = inits[:max_inits]
    if inits.size == 0:
        raise ConfigError("init schedule is empty: test period lacks verification data")
    return inits


def load_or_generate_truth(cfg: ExperimentConfig) -> FieldArchive:
    if cfg.truth is not None:
        try:
            return load_archive(cfg.truth)
        except OSError as exc:
            raise ConfigError(f"cannot read truth archive {cfg.truth}: {exc}") from exc
    path = cfg.out_dir / "truth"
    if (path / "manifest.json").exists():
        return load_archive(path)
    truth = gen_truth(cfg.toy_params(), cfg.truth_years, cfg.truth_seed)
    write_archive(truth, path)
    return truth


def check_years(cfg: ExperimentConfig, truth: FieldArchive) -> None:
    years = year_of(truth.times)
    for name, (a, b) in (("train", cfg.train_years), ("test", cfg.test_years)):
        if a < years.min() or b > years.max():
            raise ConfigError(f"{name} years {a}-{b} fall outside the truth archive")


def model_variables(cfg: ExperimentConfig, mode: str | None = None) -> tuple[str, ...]:
    return fc.architecture(mode or cfg.mode).variables


def train_or_load(cfg: ExperimentConfig, truth: FieldArchive, mode: str | None = None,
                  stage2: bool = True, tag: str | None = None) -> fc.SurrogateModel:
    mode = mode or cfg.mode
    tag = tag or (f"model_{mode}" + ("" if stage2 else "_det"))
    path = cfg.out_dir / tag
    if (path / "manifest.json").exists():
        return fc.load_checkpoint(path)
    tc = cfg.train_config(mode=mode)
    if not stage2:
        tc = replace(tc, stage2_epochs=0)
    model, history = fc.train(truth, tc, log=log.info)
    fc.save_checkpoint(model, path)
    (path / "history.csv").write_text(fc.history_csv(history))
    return model


def build_climatologies(cfg: ExperimentConfig, truth: FieldArchive, variables,
                        windows: dict[str, list[LeadWindow]]) -> ClimSet:
    path = cfg.out_dir / "clim"
    obs = {}
    for kind in windows:
        p = path / f"observed_{kind}"
        if (p / "manifest.json").exists():
            clim = load_climatology(p)
            if set(variables) <= set(clim.variables):
                obs[kind] = clim
    missing = {k: ws for k, ws in windows.items() if k not in obs}
    if missing:
        # cached on disk for every truth variable so later commands can reuse them
        built = observed_climatologies(truth, cfg.train_years, missing, truth.variables,
                                       cfg.halfwidth)
        for kind, clim in built.items():
            write_climatology(clim, path / f"observed_{kind}")
            obs[kind] = clim
    return ClimSet(obs)


def model_climatologies(cfg: ExperimentConfig, truth: FieldArchive, system: ForecastSystem,
                        windows: dict[str, list[LeadWindow]], threads: int = 1) -> dict[str, Climatology]:
    """Model climatology per window kind from a hindcast sweep over the training years."""
    path = cfg.out_dir / "clim"
    if all((path / f"model_{k}" / "manifest.json").exists() for k in windows):
        return {k: load_climatology(path / f"model_{k}") for k in windows}
    inits = init_schedule(truth, cfg.train_years, cfg.init_every_days, cfg.lead_steps,
                          cfg.clim_max_inits)
    n_steps = max(w.last for ws in windows.values() for w in ws)

    def one(t):
        wm = system.window_members(truth, int(t), n_steps, windows)
        return {k: EnsembleHindcast(truth.grid, system.variables, int(t),
                                    STEP_HOURS * np.array([w.clim_offset_steps for w in windows[k]]),
                                    wm.values[k])
                for k in windows}

    per_init = parallel_map(one, list(inits), threads)
    out = {}
    for k in windows:
        clim = compute_model_climatology([d[k] for d in per_init], cfg.train_years, cfg.halfwidth)
        write_climatology(clim, path / f"model_{k}")
        out[k] = clim
    return out


@dataclass
class HindcastResult:
    report: mt.SkillReport
    inits: np.ndarray
    paths: dict[str, Path]
    flags: dict[str, str]


def run_hindcast(cfg: ExperimentConfig, threads: int = 1, model: fc.SurrogateModel | None = None,
                 truth: FieldArchive | None = None, write: bool = True) -> HindcastResult:
    """Full campaign: ensembles per init, climatologies, verification, CSV."""
    truth = truth if truth is not None else load_or_generate_truth(cfg)
    check_years(cfg, truth)
    model = model if model is not None else train_or_load(cfg, truth)
    variables = cfg.variables or model.variables
    windows = default_windows(cfg.lead_steps)
    clims = build_climatologies(cfg, truth, model.variables, windows)
    sigma = anomaly_sigma(truth, clims.observed["step"], cfg.train_years, model.variables)
    pcfg = cfg.perturbation_config()
    system = SurrogateSystem(model, pcfg, cfg.members, sigma)
    system.variables = tuple(variables)
    if "model" in cfg.climatology:
        sweep = SurrogateSystem(model, pcfg, cfg.clim_members or cfg.members, sigma)
        sweep.variables = tuple(variables)
        clims.model = model_climatologies(cfg, truth, sweep, windows, threads)
    dry = biweekly_dry_mask(truth, cfg.train_years, cfg.halfwidth) if "tp" in variables else None
    inits = init_schedule(truth, cfg.test_years, cfg.init_every_days, cfg.lead_steps,
                          cfg.max_inits)
    hc_dir = cfg.out_dir / "hindcasts"

    def save(hc):
        if write:
            ens.write_ensemble(hc, system.specs[hc.init_time], pcfg,
                               hc_dir / f"init_{hc.init_time:08d}")

    report = verify_system(system, truth, inits, cfg.lead_steps, windows, clims, cfg.climatology,
                           cfg.regions, dry, threads, cfg.min_member_fraction, on_hindcast=save)
    failed = [f"{t}:{s.member}" for t in sorted(system.specs) for s in system.specs[t] if not s.ok]
    if failed:
        report.flags["failed_members"] = " ".join(failed)
    paths = {}
    if write:
        paths["skill"] = report.write_csv(cfg.out_dir / "skill.csv")
        paths["maps"] = write_maps(report, cfg.out_dir / "maps")
        paths["hindcasts"] = hc_dir
        if report.flags:
            (cfg.out_dir / "flags.json").write_text(json.dumps(report.flags, indent=2,
                                                               sort_keys=True) + "\n")
    return HindcastResult(report, inits, paths, dict(report.flags))


def verify_saved(cfg: ExperimentConfig, threads: int = 1) -> HindcastResult:
    """Re-verify stored hindcasts (both climatology kinds) without regenerating them."""
    truth = load_or_generate_truth(cfg)
    hc_dir = cfg.out_dir / "hindcasts"
    dirs = sorted(p for p in hc_dir.glob("init_*") if (p / "ensemble.json").exists())
    if not dirs:
        raise ConfigError(f"no stored hindcasts under {hc_dir}")
    hindcasts = {}
    for d in dirs:
        hc = ens.load_ensemble(d)
        hindcasts[hc.init_time] = hc
    first = next(iter(hindcasts.values()))
    variables = cfg.variables or first.variables
    windows = default_windows(cfg.lead_steps)
    clims = build_climatologies(cfg, truth, first.variables, windows)
    if "model" in cfg.climatology:
        path = cfg.out_dir / "clim"
        if not all((path / f"model_{k}" / "manifest.json").exists() for k in windows):
            raise ConfigError("model climatology missing: run the climatology step first")
        clims.model = {k: load_climatology(path / f"model_{k}") for k in windows}
    dry = biweekly_dry_mask(truth, cfg.train_years, cfg.halfwidth) if "tp" in variables else None
    system = ForecastSystem(variables)
    inits = np.array(sorted(hindcasts))
    report = verify_system(system, truth, inits, cfg.lead_steps, windows, clims, cfg.climatology,
                           cfg.regions, dry, threads, cfg.min_member_fraction, hindcasts=hindcasts)
    paths = {"skill": report.write_csv(cfg.out_dir / "skill.csv"),
             "maps": write_maps(report, cfg.out_dir / "maps")}
    return HindcastResult(report, inits, paths, dict(report.flags))


def write_maps(report: mt.SkillReport, path) -> Path:
    """Skill maps as one float32 payload plus a JSON index (deterministic bytes)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    keys = sorted(report.maps)
    arr = np.stack([report.maps[k] for k in keys]) if keys else np.zeros((0, 0, 0))
    (path / "maps.f32").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    index = {"format_version": 1, "kind": "skill_maps", "shape": list(arr.shape),
             "keys": [list(k) for k in keys]}
    (path / "manifest.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path


def read_maps(path) -> dict[tuple, np.ndarray]:
    path = Path(path)
    index = json.loads((path / "manifest.json").read_text())
    arr = np.frombuffer((path / "maps.f32").read_bytes(), dtype="<f4").reshape(index["shape"])
    return {tuple(k): arr[i].astype(np.float64) for i, k in enumerate(index["keys"])}


# ---------------------------------------------------------------------------
# error growth


@dataclass
class ErrorCurve:
    variable: str
    lead_steps: np.ndarray
    rmse: np.ndarray  # deterministic (control) rollout, averaged over inits
    saturation: float  # sqrt(2) * sigma_clim
    ensemble_rmse: np.ndarray | None = None

    def final_quarter_max(self, ensemble: bool = False) -> float:
        r = self.ensemble_rmse if ensemble else self.rmse
        n = r.size - 1
        return float(np.nanmax(r[n - n // 4:]))

    def final_quarter_mean(self, ensemble: bool = False) -> float:
        r = self.ensemble_rmse if ensemble else self.rmse
        n = r.size - 1
        return float(np.nanmean(r[n - n // 4:]))


def error_growth(model: fc.SurrogateModel, truth: FieldArchive, inits: Sequence[int],
                 raw_clim: Climatology, sigma_years, n_steps: int = 360,
                 variables: Sequence[str] | None = None, ic_sigma: dict | None = None,
                 ensemble: ens.PerturbationConfig | None = None, members: int = 0,
                 threads: int = 1, min_inits: int = 10) -> dict[str, ErrorCurve]:
    """Lat-weighted RMSE of the unperturbed rollout per lead, averaged over inits.

    With ``ensemble`` and ``members`` > 1 the ensemble-mean RMSE is returned as
    well.  The saturation reference is sqrt(2) times the climatological
    anomaly standard deviation over ``sigma_years``.
    """
    if len(inits) < min_inits:
        raise ValueError(f"error growth needs at least {min_inits} init dates, got {len(inits)}")
    variables = tuple(variables or model.variables)
    vidx = [model.variables.index(v) for v in variables]
    sig = anomaly_sigma(truth, raw_clim, sigma_years, variables)
    w = truth.grid.weights[:, None] * np.ones(truth.grid.shape)
    w = w / w.sum()

    def curves(t):
        snap = truth_snapshot(truth, int(t), model.variables)
        obs = truth_segment(truth, int(t), n_steps, variables)
        traj = fc.rollout(model, snap, int(t), truth.grid.lat, n_steps)
        det = np.moveaxis(traj.values[0][:, vidx], 1, 0)  # [var, lead, lat, lon]
        out = [np.sqrt(((det - obs) ** 2 * w).sum(axis=(-2, -1)))]
        if ensemble is not None and members > 1:
            hc, _ = ens.generate_members(model, snap, int(t), truth.grid, members, n_steps,
                                         ensemble, ic_sigma or sig)
            em = np.nanmean(hc.values[vidx].astype(np.float64), axis=1)
            out.append(np.sqrt(((em - obs) ** 2 * w).sum(axis=(-2, -1))))
        return out

    per = parallel_map(curves, list(inits), threads)
    det = np.mean([p[0] for p in per], axis=0)
    ensm = np.mean([p[1] for p in per], axis=0) if len(per[0]) > 1 else None
    lead = np.arange(n_steps + 1)
    return {v: ErrorCurve(v, lead, det[i], math.sqrt(2.0) * sig[v],
                          None if ensm is None else ensm[i])
            for i, v in enumerate(variables)}


def error_growth_csv(curves: dict[str, ErrorCurve]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["variable", "lead_step", "rmse", "ensemble_rmse", "saturation"])
    for v in sorted(curves):
        c = curves[v]
        for i, lead in enumerate(c.lead_steps):
            e = "" if c.ensemble_rmse is None else repr(float(c.ensemble_rmse[i]))
            wr.writerow([v, int(lead), repr(float(c.rmse[i])), e, repr(c.saturation)])
    return buf.getvalue()


def run_error_growth(cfg: ExperimentConfig, threads: int = 1, model=None, truth=None,
                     write: bool = True) -> dict[str, ErrorCurve]:
    truth = truth if truth is not None else load_or_generate_truth(cfg)
    check_years(cfg, truth)
    model = model if model is not None else train_or_load(cfg, truth)
    windows = {"step": lead_windows("step", 0, [0])}
    clims = build_climatologies(cfg, truth, model.variables, windows)
    raw = clims.observed["step"]
    inits = init_schedule(truth, cfg.test_years, cfg.init_every_days, cfg.error_growth_steps,
                          cfg.error_growth_inits)
    sigma = anomaly_sigma(truth, raw, cfg.train_years, model.variables)
    curves = error_growth(model, truth, inits, raw, cfg.train_years, cfg.error_growth_steps,
                          ic_sigma=sigma, ensemble=cfg.perturbation_config(),
                          members=cfg.members, threads=threads)
    if write:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / "error_growth.csv").write_text(error_growth_csv(curves))
    return curves


# ---------------------------------------------------------------------------
# ablation ladder


@dataclass
class AblationRow:
    label: str
    weekly_acc: list[float]
    per_variable: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class AblationTable:
    rows: list[AblationRow]
    variables: tuple[str, ...]
    n_inits: int
    flags: dict[str, str] = field(default_factory=dict)

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        n = max((len(r.weekly_acc) for r in self.rows), default=0)
        wr.writerow(["label", "variable"] + [f"week{i + 1}" for i in range(n)])
        for r in self.rows:
            wr.writerow([r.label, "mean"] + [repr(float(x)) for x in r.weekly_acc])
            for v in sorted(r.per_variable):
                wr.writerow([r.label, v] + [repr(float(x)) for x in r.per_variable[v]])
        return buf.getvalue()


def weekly_acc(report: mt.SkillReport, variables, n_weeks: int, kind: str = "observed",
               region: str = "global") -> tuple[list[float], dict[str, list[float]]]:
    per = {v: [report.value(v, "ACC", kind, f"week{w}", region) for w in range(1, n_weeks + 1)]
           for v in variables}
    mean = [float(np.mean([per[v][i] for v in variables])) for i in range(n_weeks)]
    return mean, per


def run_ablation(cfg: ExperimentConfig, threads: int = 1, truth=None, write: bool = True,
                 region: str = "global") -> AblationTable:
    """Five-row ladder: V1, AOL, W2S deterministic, then W2S ensembles (IC; IC + model).

    Every mode trains with the same seed and budget; the deterministic rows use
    stage-1 weights, the IC+model row the stage-2 weights with perturbation on.
    Skill is the global aggregate weekly ACC (observed climatology) averaged
    over the variables every mode predicts.
    """
    truth = truth if truth is not None else load_or_generate_truth(cfg)
    check_years(cfg, truth)
    common = tuple(v for v in fc.MODEL_VARIABLES
                   if all(v in fc.architecture(m).variables for m in ("V1", "AOL", "W2S")))
    n_weeks = cfg.lead_steps // mt.STEPS_PER_WEEK
    if n_weeks < 1:
        raise ConfigError("ablation needs at least one full lead week")
    windows = {"weekly": lead_windows("weekly", cfg.lead_steps)}
    clims = build_climatologies(cfg, truth, fc.MODEL_VARIABLES, {**windows,
                                                                "step": lead_windows("step", 0)})
    sigma = anomaly_sigma(truth, clims.observed["step"], cfg.train_years, fc.MODEL_VARIABLES)
    inits = init_schedule(truth, cfg.test_years, cfg.init_every_days, cfg.lead_steps,
                          cfg.ablation_inits)
    rows, flags = [], {}
    models = {}

    def score(label, model, pcfg, members):
        system = SurrogateSystem(model, pcfg, members, sigma)
        system.variables = common
        rep = verify_system(system, truth, inits, cfg.lead_steps, windows, clims, ("observed",),
                            (region,), None, threads, cfg.min_member_fraction)
        mean, per = weekly_acc(rep, common, n_weeks, "observed", region)
        rows.append(AblationRow(label, mean, per))
        if rep.flags:
            flags[label] = "; ".join(f"{k}={v}" for k, v in sorted(rep.flags.items()))
        log.info("ablation %s: %s", label, " ".join(f"{x:.3f}" for x in mean))

    det = cfg.perturbation_config(mode="none", control=True)
    try:
        for mode in ("V1", "AOL", "W2S"):
            models[mode] = train_or_load(cfg, truth, mode, stage2=False, tag=f"ablation_{mode}")
            score(mode, models[mode], det, 1)
        score("W2S+IC", models["W2S"], cfg.perturbation_config(mode="ic"), cfg.members)
        path = cfg.out_dir / "ablation_W2S_stage2"
        if (path / "manifest.json").exists():
            full = fc.load_checkpoint(path)
        else:
            tc = cfg.train_config(mode="W2S", stage1_epochs=0)
            full, hist = fc.train(truth, tc, model=models["W2S"].copy(), log=log.info)
            fc.save_checkpoint(full, path)
            (path / "history.csv").write_text(fc.history_csv(hist))
        score("W2S+IC+model", full, cfg.perturbation_config(mode="both"), cfg.members)
    except fc.TrainingDiverged as exc:
        flags["aborted"] = f"training failed: {exc}"
        table = AblationTable(rows, common, len(inits), flags)
        if write:
            _write_ablation(cfg, table)
        raise PartialResults(str(exc)) from exc
    table = AblationTable(rows, common, len(inits), flags)
    if write:
        _write_ablation(cfg, table)
    return table


def _write_ablation(cfg: ExperimentConfig, table: AblationTable) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "ablation.csv").write_text(table.to_csv())


# ---------------------------------------------------------------------------
# reports


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "toys2s"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _window_order(label: str) -> tuple:
    digits = "".join(ch for ch in label if ch.isdigit())
    prefix = label.rstrip("0123456789-")
    return prefix, int(digits.split("-")[0]) if digits else 0


def emit_report(report: mt.SkillReport, out_dir, formats: Sequence[str] = ("csv", "svg"),
                curves: dict[str, ErrorCurve] | None = None,
                ablation: AblationTable | None = None) -> list[Path]:
    """Write the skill CSV and SVG charts; rows without pairs are skipped with a warning."""
    if not report.entries:
        raise ValueError("report is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    kept = mt.SkillReport(flags=dict(report.flags))
    for e in report.sorted_entries():
        if e.n_pairs == 0:
            log.warning("skipping empty row: %s %s %s %s %s", *e.key())
            continue
        kept.entries.append(e)
    kept.maps = {k: v for k, v in report.maps.items()}
    written = []
    if "csv" in formats:
        written.append(kept.write_csv(out / "skill.csv"))
    if "svg" in formats:
        plt = _pyplot()
        groups: dict[tuple, list] = {}
        for e in kept.entries:
            if e.lead_window.startswith("lead"):
                continue
            prefix = _window_order(e.lead_window)[0]
            groups.setdefault((e.variable, e.metric, prefix, e.region), []).append(e)
        for (var, metric, prefix, region), es in sorted(groups.items()):
            fig, ax = plt.subplots(figsize=(5, 3.2))
            for kind in sorted({e.climatology_kind for e in es}):
                sel = sorted((e for e in es if e.climatology_kind == kind),
                             key=lambda e: _window_order(e.lead_window))
                ax.plot([_window_order(e.lead_window)[1] for e in sel], [e.value for e in sel],
                        marker="o", label=kind)
            ax.set_xlabel(f"lead {prefix}")
            ax.set_ylabel(metric)
            ax.set_title(f"{var} {metric} ({region})")
            ax.legend()
            fig.tight_layout()
            written.append(_save_svg(fig, out / f"line_{var}_{metric}_{prefix}_{region}.svg"))
            plt.close(fig)
        for key in sorted(kept.maps):
            var, metric, kind, window, region = key
            fig, ax = plt.subplots(figsize=(6, 3))
            im = ax.imshow(kept.maps[key], origin="lower", aspect="auto", cmap="RdBu_r",
                           vmin=-1, vmax=1)
            fig.colorbar(im, ax=ax)
            ax.set_title(f"{var} {metric} {kind} {window}")
            ax.set_xlabel("longitude index")
            ax.set_ylabel("latitude index")
            fig.tight_layout()
            written.append(_save_svg(fig, out / f"map_{var}_{metric}_{kind}_{window}.svg"))
            plt.close(fig)
        if curves:
            fig, ax = plt.subplots(figsize=(6, 3.5))
            for v in sorted(curves):
                c = curves[v]
                line, = ax.plot(c.lead_steps, c.rmse / c.saturation, label=f"{v} control")
                if c.ensemble_rmse is not None:
                    ax.plot(c.lead_steps, c.ensemble_rmse / c.saturation, ls="--",
                            color=line.get_color(), label=f"{v} ensemble mean")
            ax.axhline(1.0, color="k", lw=0.8)
            ax.set_xlabel("lead step (6 h)")
            ax.set_ylabel("RMSE / saturation")
            ax.legend(fontsize=7)
            fig.tight_layout()
            written.append(_save_svg(fig, out / "error_growth.svg"))
            plt.close(fig)
        if ablation is not None:
            written.append(ablation_svg(ablation, out / "ablation.svg"))
    return written


def ablation_svg(table: AblationTable, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for r in table.rows:
        ax.plot(np.arange(1, len(r.weekly_acc) + 1), r.weekly_acc, marker="o", label=r.label)
    ax.set_xlabel("lead week")
    ax.set_ylabel("ACC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, Path(path))
    plt.close(fig)
    return Path(path)


def setup_run_log(out_dir) -> logging.Handler:
    """Timestamps live only in the run log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler
