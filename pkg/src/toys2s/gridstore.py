"""Gridded data model: grids, 6-hourly archives, climatologies and anomalies.

Times are integer hours on a 360-day calendar (12 months of 30 days), counted
from hour 0 of year 0.  An archive on disk is a directory holding a JSON
manifest and one raw little-endian float32 payload per variable, row-major
``[time, lat, lon]``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
STEP_HOURS = 6
HOURS_PER_DAY = 24
STEPS_PER_DAY = HOURS_PER_DAY // STEP_HOURS
DAYS_PER_YEAR = 360
HOURS_PER_YEAR = HOURS_PER_DAY * DAYS_PER_YEAR
N_KEYS = DAYS_PER_YEAR * STEPS_PER_DAY
DEFAULT_QUANTILES = (1.0 / 3.0, 2.0 / 3.0, 0.9)

# variables aggregated by summation rather than averaging over windows
ACCUMULATED_VARIABLES = frozenset({"tp"})


class ArchiveError(ValueError):
    pass


class ClimatologyError(ValueError):
    pass


def calendar_key(hours):
    """Map hours to the (day-of-year, 6-hour slot) key, flattened as doy*4 + slot."""
    hours = np.asarray(hours, dtype=np.int64)
    doy = (hours // HOURS_PER_DAY) % DAYS_PER_YEAR
    slot = (hours % HOURS_PER_DAY) // STEP_HOURS
    return doy * STEPS_PER_DAY + slot


def year_of(hours):
    return np.asarray(hours, dtype=np.int64) // HOURS_PER_YEAR


def day_of_year(hours):
    return (np.asarray(hours, dtype=np.int64) // HOURS_PER_DAY) % DAYS_PER_YEAR


@dataclass(frozen=True, eq=False)
class Grid:
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if lat.ndim != 1 or lon.ndim != 1 or lat.size == 0 or lon.size == 0:
            raise ValueError("lat and lon must be non-empty 1-d arrays")
        if np.any(np.diff(lat) <= 0) or lat[0] < -90 or lat[-1] > 90:
            raise ValueError("lat must be strictly increasing within [-90, 90]")
        if np.any(np.diff(lon) <= 0) or lon[0] < 0 or lon[-1] >= 360:
            raise ValueError("lon must be strictly increasing within [0, 360)")
        if np.any(np.cos(np.deg2rad(lat)) <= 0):
            raise ValueError("poles carry zero area weight; use cell-centre latitudes")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    @property
    def nlat(self) -> int:
        return self.lat.size

    @property
    def nlon(self) -> int:
        return self.lon.size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @property
    def weights(self) -> np.ndarray:
        """cos(lat) weights scaled to unit mean."""
        w = np.cos(np.deg2rad(self.lat))
        return w / w.mean()

    @classmethod
    def regular(cls, nlat: int, nlon: int) -> "Grid":
        dlat = 180.0 / nlat
        lat = -90.0 + dlat * (np.arange(nlat) + 0.5)
        lon = np.arange(nlon) * (360.0 / nlon)
        return cls(lat, lon)

    def same_as(self, other: "Grid") -> bool:
        return (
            self.lat.shape == other.lat.shape
            and self.lon.shape == other.lon.shape
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
        )

    def to_dict(self) -> dict:
        return {"lat": self.lat.tolist(), "lon": self.lon.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(np.array(d["lat"], dtype=np.float64), np.array(d["lon"], dtype=np.float64))


@dataclass(frozen=True)
class Region:
    """Lat/lon box; lon_min > lon_max wraps through the prime meridian."""

    lat_min: float = -90.0
    lat_max: float = 90.0
    lon_min: float = 0.0
    lon_max: float = 360.0
    name: str = "global"

    def mask(self, grid: Grid) -> np.ndarray:
        lat_in = (grid.lat >= self.lat_min) & (grid.lat <= self.lat_max)
        lo, hi = self.lon_min % 360.0, self.lon_max % 360.0
        if self.lon_max - self.lon_min >= 360.0:
            lon_in = np.ones(grid.nlon, dtype=bool)
        elif lo <= hi:
            lon_in = (grid.lon >= lo) & (grid.lon <= hi)
        else:
            lon_in = (grid.lon >= lo) | (grid.lon <= hi)
        return lat_in[:, None] & lon_in[None, :]


GLOBAL = Region()
TROPICS = Region(-15.0, 15.0, 0.0, 360.0, "tropics")


def area_mean(values, grid: Grid, region: Region = GLOBAL) -> np.ndarray | float:
    """cos-latitude weighted mean over the trailing (lat, lon) axes inside ``region``.

    NaN points are skipped.  Raises if the region holds no grid point.
    """
    values = np.asarray(values, dtype=np.float64)
    inside = region.mask(grid)
    if not inside.any():
        raise ValueError(f"region {region.name!r} does not intersect the grid")
    w = np.where(inside, grid.weights[:, None], 0.0)
    w = np.broadcast_to(w, values.shape)
    ok = np.isfinite(values) & (w > 0)
    num = np.where(ok, values, 0.0) * np.where(ok, w, 0.0)
    den = np.where(ok, w, 0.0).sum(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num.sum(axis=(-2, -1)) / den
    out = np.where(den > 0, out, np.nan)
    return float(out) if out.ndim == 0 else out


def _check_times(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=np.int64)
    if times.ndim != 1 or times.size == 0:
        raise ArchiveError("time axis must be a non-empty 1-d array")
    if times.size > 1 and np.any(np.diff(times) != STEP_HOURS):
        raise ArchiveError("non-uniform 6-hour axis")
    return times


@dataclass(frozen=True, eq=False)
class FieldArchive:
    """Values indexed ``[variable, time, lat, lon]`` on a uniform 6-hour axis.

    ``anomaly`` names the climatology kind the values are deviations from, or
    is None for raw values.
    """

    grid: Grid
    variables: tuple[str, ...]
    times: np.ndarray
    values: np.ndarray
    attrs: dict = field(default_factory=dict)
    anomaly: str | None = None

    def __post_init__(self):
        times = _check_times(self.times)
        values = np.asarray(self.values, dtype=np.float32)
        variables = tuple(self.variables)
        if values.shape != (len(variables), times.size, self.grid.nlat, self.grid.nlon):
            raise ArchiveError(
                f"values shape {values.shape} does not match "
                f"({len(variables)}, {times.size}, {self.grid.nlat}, {self.grid.nlon})"
            )
        if len(set(variables)) != len(variables):
            raise ArchiveError("duplicate variable ids")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variables", variables)

    @property
    def n_times(self) -> int:
        return self.times.size

    def index(self, variable: str) -> int:
        try:
            return self.variables.index(variable)
        except ValueError:
            raise KeyError(f"variable {variable!r} not in archive") from None

    def field(self, variable: str) -> np.ndarray:
        return self.values[self.index(variable)]

    def masks(self) -> dict[str, np.ndarray]:
        """Per-variable static masks: points that are non-finite at every time."""
        return {v: ~np.isfinite(self.values[i]).any(axis=0) for i, v in enumerate(self.variables)}

    def time_index(self, hours) -> np.ndarray:
        idx = (np.asarray(hours, dtype=np.int64) - self.times[0]) // STEP_HOURS
        if np.any(idx < 0) or np.any(idx >= self.n_times):
            raise KeyError("requested time outside the archive")
        return idx

    def select_years(self, first: int, last: int) -> "FieldArchive":
        years = year_of(self.times)
        keep = (years >= first) & (years <= last)
        if not keep.any():
            raise KeyError(f"no data in years {first}-{last}")
        return replace(self, times=self.times[keep], values=self.values[:, keep])

    def select_variables(self, variables: Sequence[str]) -> "FieldArchive":
        idx = [self.index(v) for v in variables]
        return replace(self, variables=tuple(variables), values=self.values[idx])


@dataclass(frozen=True, eq=False)
class EnsembleHindcast:
    """One initialization: values ``[variable, member, lead, lat, lon]``.

    ``lead_hours`` gives each lead's offset from ``init_time``.  For window
    aggregates it holds the offset at which each window starts.
    """

    grid: Grid
    variables: tuple[str, ...]
    init_time: int
    lead_hours: np.ndarray
    values: np.ndarray
    anomaly: str | None = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        lead = np.asarray(self.lead_hours, dtype=np.int64)
        variables = tuple(self.variables)
        if values.ndim != 5 or values.shape[0] != len(variables) or values.shape[2] != lead.size:
            raise ValueError(f"hindcast values shape {values.shape} inconsistent with axes")
        if values.shape[3:] != self.grid.shape:
            raise ValueError("hindcast grid mismatch")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lead_hours", lead)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "init_time", int(self.init_time))

    @property
    def n_members(self) -> int:
        return self.values.shape[1]

    def index(self, variable: str) -> int:
        try:
            return self.variables.index(variable)
        except ValueError:
            raise KeyError(f"variable {variable!r} not in hindcast") from None

    def member_archive(self, m: int) -> FieldArchive:
        return FieldArchive(
            self.grid,
            self.variables,
            self.init_time + self.lead_hours,
            self.values[:, m],
            attrs={"init_time": self.init_time, "member": m},
        )


# ---------------------------------------------------------------------------
# archive I/O


def _write_payload(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_payload(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ArchiveError(f"payload {path.name}: size {len(raw)} bytes, manifest implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _dump_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_archive(archive: FieldArchive, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = {}
    masks = {}
    for i, v in enumerate(archive.variables):
        fname = f"{v}.f32"
        _write_payload(path / fname, archive.values[i])
        payload[v] = fname
        m = ~np.isfinite(archive.values[i]).any(axis=0)
        if m.any():
            masks[v] = np.flatnonzero(m).tolist()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "field_archive",
        "dims": ["time", "lat", "lon"],
        "shape": [archive.n_times, archive.grid.nlat, archive.grid.nlon],
        "variables": list(archive.variables),
        "grid": archive.grid.to_dict(),
        "time": {
            "start_hours": int(archive.times[0]),
            "step_hours": STEP_HOURS,
            "count": archive.n_times,
            "calendar": "360_day",
        },
        "dtype": "float32",
        "byte_order": "little",
        "payload": payload,
        "masks": masks,
        "anomaly": archive.anomaly,
        "attrs": archive.attrs,
    }
    _dump_json(path / "manifest.json", manifest)
    return path


def _read_manifest(path: Path, kind: str) -> dict:
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ArchiveError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unknown format version {version!r}")
    if manifest.get("kind", kind) != kind:
        raise ArchiveError(f"{path} holds a {manifest.get('kind')}, expected {kind}")
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise ArchiveError("only little-endian float32 payloads are supported")
    return manifest


def load_archive(path: str | os.PathLike) -> FieldArchive:
    path = Path(path)
    manifest = _read_manifest(path, "field_archive")
    t = manifest["time"]
    if t["step_hours"] != STEP_HOURS:
        raise ArchiveError("non-uniform 6-hour axis")
    if t.get("calendar", "360_day") != "360_day":
        raise ArchiveError(f"unsupported calendar {t['calendar']!r}")
    grid = Grid.from_dict(manifest["grid"])
    nt = t["count"]
    shape = (nt, grid.nlat, grid.nlon)
    if list(shape) != manifest["shape"]:
        raise ArchiveError("manifest shape disagrees with grid/time axes")
    variables = manifest["variables"]
    values = np.stack([_read_payload(path / manifest["payload"][v], shape) for v in variables])
    times = t["start_hours"] + STEP_HOURS * np.arange(nt, dtype=np.int64)
    return FieldArchive(grid, tuple(variables), times, values, attrs=manifest.get("attrs", {}),
                        anomaly=manifest.get("anomaly"))


# ---------------------------------------------------------------------------
# climatology


@dataclass(frozen=True, eq=False)
class Climatology:
    """Calendar-keyed means and quantiles.

    observed: ``mean[var, key, lat, lon]`` with key = doy*4 + slot over all
    1440 keys.  model: ``mean[var, key, lead, lat, lon]`` where ``keys`` holds
    the init keys present and ``lead_hours`` the lead axis.  ``quantiles`` adds
    a quantile axis right after the variable axis.
    """

    kind: str
    grid: Grid
    variables: tuple[str, ...]
    quantile_levels: tuple[float, ...]
    mean: np.ndarray
    quantiles: np.ndarray
    keys: np.ndarray
    lead_hours: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("observed", "model"):
            raise ClimatologyError(f"unknown climatology kind {self.kind!r}")
        if (self.kind == "model") != (self.lead_hours is not None):
            raise ClimatologyError("model climatology carries a lead axis; observed does not")
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "quantile_levels", tuple(float(q) for q in self.quantile_levels))
        object.__setattr__(self, "keys", np.asarray(self.keys, dtype=np.int64))
        if self.lead_hours is not None:
            object.__setattr__(self, "lead_hours", np.asarray(self.lead_hours, dtype=np.int64))

    def index(self, variable: str) -> int:
        try:
            return self.variables.index(variable)
        except ValueError:
            raise ClimatologyError(f"variable {variable!r} not in climatology") from None

    def key_index(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.clip(pos, 0, self.keys.size - 1)
        if np.any(self.keys[pos] != keys):
            missing = np.unique(keys[self.keys[pos] != keys])[:5]
            raise ClimatologyError(f"no climatology for calendar keys {missing.tolist()}")
        return pos

    def quantile(self, level: float) -> np.ndarray:
        for i, q in enumerate(self.quantile_levels):
            if abs(q - level) < 1e-9:
                return self.quantiles[:, i]
        raise ClimatologyError(f"quantile {level} not computed")


def _pool_offsets(halfwidth: int) -> np.ndarray:
    return np.arange(-halfwidth, halfwidth + 1)


def compute_climatology(obs: FieldArchive, window: tuple[int, int], halfwidth: int = 7,
                        quantiles: Sequence[float] = DEFAULT_QUANTILES) -> Climatology:
    """Observed climatology over years ``window`` (inclusive).

    For each (day-of-year, 6-hour slot) the samples are every window year at
    days doy-halfwidth..doy+halfwidth (circular in the calendar) at that slot.
    Quantiles use linear interpolation between order statistics.
    """
    first, last = window
    years = year_of(obs.times)
    nyears = last - first + 1
    if nyears < 1 or years.min() > first or years.max() < last:
        raise ClimatologyError(f"window {first}-{last} not covered by observations")
    sub = obs.select_years(first, last)
    if sub.n_times != nyears * N_KEYS:
        raise ClimatologyError(f"window {first}-{last} not fully covered by observations")
    start_key = int(calendar_key(sub.times[0]))
    if start_key != 0:
        raise ClimatologyError("observation window must start at day 0, slot 0")
    if nyears * (2 * halfwidth + 1) < 2:
        raise ClimatologyError("fewer than 2 samples per calendar key")
    nv = len(obs.variables)
    nlat, nlon = obs.grid.shape
    qs = np.asarray(quantiles, dtype=np.float64)
    mean = np.empty((nv, N_KEYS, nlat, nlon), dtype=np.float32)
    qout = np.empty((nv, qs.size, N_KEYS, nlat, nlon), dtype=np.float32)
    offsets = _pool_offsets(halfwidth)
    for v in range(nv):
        data = sub.values[v].reshape(nyears, DAYS_PER_YEAR, STEPS_PER_DAY, nlat, nlon)
        for s in range(STEPS_PER_DAY):
            for i in range(nlat):
                block = data[:, :, s, i, :].astype(np.float64)  # [year, doy, lon]
                samples = np.concatenate([np.roll(block, -o, axis=1) for o in offsets], axis=0)
                mean[v, s::STEPS_PER_DAY, i] = samples.mean(axis=0)
                if qs.size:
                    qout[v, :, s::STEPS_PER_DAY, i] = np.quantile(samples, qs, axis=0)
    return Climatology("observed", obs.grid, obs.variables, tuple(qs), mean, qout,
                       np.arange(N_KEYS), attrs={"window": [first, last], "halfwidth": halfwidth})


def _circular_day_distance(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % DAYS_PER_YEAR
    return np.minimum(d, DAYS_PER_YEAR - d)


def compute_model_climatology(hindcasts: Iterable[EnsembleHindcast], window: tuple[int, int],
                              halfwidth: int = 7, quantiles: Sequence[float] = DEFAULT_QUANTILES,
                              pool_leads: bool = False) -> Climatology:
    """Hindcast climatology keyed by init (day-of-year, slot) and lead.

    Samples for a key are all members of every hindcast in the window whose
    init day lies within ``halfwidth`` days (circular) at the same slot.  With
    ``pool_leads`` the statistics are pooled across leads and broadcast back.
    """
    first, last = window
    hcs = [h for h in hindcasts if first <= int(year_of(h.init_time)) <= last]
    if not hcs:
        raise ClimatologyError(f"no hindcasts initialized in {first}-{last}")
    ref = hcs[0]
    for h in hcs:
        if not np.array_equal(h.lead_hours, ref.lead_hours):
            raise ClimatologyError("missing lead coverage: hindcasts disagree on lead axis")
        if h.variables != ref.variables or not h.grid.same_as(ref.grid):
            raise ClimatologyError("hindcasts disagree on variables or grid")
    init_keys = np.array([int(calendar_key(h.init_time)) for h in hcs])
    keys = np.unique(init_keys)
    days = init_keys // STEPS_PER_DAY
    slots = init_keys % STEPS_PER_DAY
    qs = np.asarray(quantiles, dtype=np.float64)
    nv, nl = len(ref.variables), ref.lead_hours.size
    nlat, nlon = ref.grid.shape
    mean = np.empty((nv, keys.size, nl, nlat, nlon), dtype=np.float32)
    qout = np.empty((nv, qs.size, keys.size, nl, nlat, nlon), dtype=np.float32)
    for k, key in enumerate(keys):
        sel = (slots == key % STEPS_PER_DAY) & (
            _circular_day_distance(days, key // STEPS_PER_DAY) <= halfwidth)
        members = np.concatenate([hcs[i].values for i in np.flatnonzero(sel)], axis=1)
        members = members.astype(np.float64)  # [var, sample, lead, lat, lon]
        if pool_leads:
            members = members.reshape(nv, -1, 1, nlat, nlon)
        if members.shape[1] < 1:
            raise ClimatologyError(f"no samples for key {key}")
        m = members.mean(axis=1)
        mean[:, k] = np.broadcast_to(m, (nv, nl, nlat, nlon))
        if qs.size:
            q = np.quantile(members, qs, axis=1)  # [q, var, lead, lat, lon]
            qout[:, :, k] = np.broadcast_to(np.moveaxis(q, 0, 1), (nv, qs.size, nl, nlat, nlon))
    return Climatology("model", ref.grid, ref.variables, tuple(qs), mean, qout, keys,
                       lead_hours=ref.lead_hours.copy(),
                       attrs={"window": [first, last], "halfwidth": halfwidth,
                              "pool_leads": pool_leads})


def climatology_fields(data: FieldArchive | EnsembleHindcast, clim: Climatology,
                       which: str = "mean", level: float | None = None) -> np.ndarray:
    """Climatological field matching each datum of ``data``.

    Returns an array broadcastable against ``data.values``: for archives
    ``[var, time, lat, lon]``; for hindcasts ``[var, 1, lead, lat, lon]``.
    """
    vidx = [clim.index(v) for v in data.variables]
    src = clim.mean if which == "mean" else clim.quantile(level)
    if isinstance(data, FieldArchive):
        if clim.kind != "observed":
            raise ClimatologyError("model climatology requires data with a lead axis")
        kidx = clim.key_index(calendar_key(data.times))
        return src[vidx][:, kidx]
    if clim.kind == "observed":
        kidx = clim.key_index(calendar_key(data.init_time + data.lead_hours))
        return src[vidx][:, kidx][:, None]
    if not np.array_equal(clim.lead_hours, data.lead_hours):
        raise ClimatologyError("hindcast lead axis differs from the model climatology")
    k = int(clim.key_index([calendar_key(data.init_time)])[0])
    return src[vidx][:, k][:, None]


def anomaly(data: FieldArchive | EnsembleHindcast, clim: Climatology):
    """Deviation of ``data`` from the matching climatological mean."""
    if data.anomaly is not None:
        raise ClimatologyError("data already holds anomalies")
    if not data.grid.same_as(clim.grid):
        raise ClimatologyError("grid mismatch between data and climatology")
    ref = climatology_fields(data, clim)
    values = data.values.astype(np.float64) - ref
    return replace(data, values=values, anomaly=clim.kind)


# ---------------------------------------------------------------------------
# climatology I/O (same manifest + raw payload idiom as archives)


def write_climatology(clim: Climatology, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_payload(path / "mean.f32", clim.mean)
    _write_payload(path / "quantiles.f32", clim.quantiles)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "climatology",
        "climatology_kind": clim.kind,
        "variables": list(clim.variables),
        "grid": clim.grid.to_dict(),
        "quantile_levels": list(clim.quantile_levels),
        "keys": clim.keys.tolist(),
        "lead_hours": None if clim.lead_hours is None else clim.lead_hours.tolist(),
        "mean_shape": list(clim.mean.shape),
        "quantiles_shape": list(clim.quantiles.shape),
        "dtype": "float32",
        "byte_order": "little",
        "attrs": clim.attrs,
    }
    _dump_json(path / "manifest.json", manifest)
    return path


def load_climatology(path: str | os.PathLike) -> Climatology:
    path = Path(path)
    m = _read_manifest(path, "climatology")
    mean = _read_payload(path / "mean.f32", tuple(m["mean_shape"]))
    q = _read_payload(path / "quantiles.f32", tuple(m["quantiles_shape"]))
    lead = None if m["lead_hours"] is None else np.array(m["lead_hours"], dtype=np.int64)
    return Climatology(m["climatology_kind"], Grid.from_dict(m["grid"]), tuple(m["variables"]),
                       tuple(m["quantile_levels"]), mean, q, np.array(m["keys"]), lead,
                       attrs=m.get("attrs", {}))


def rolling_window(archive: FieldArchive, n_steps: int,
                   accumulated: frozenset[str] = ACCUMULATED_VARIABLES) -> FieldArchive:
    """Forward window aggregate: entry t covers steps t+1..t+n_steps.

    Accumulated variables are summed, the rest averaged.  The last
    ``n_steps`` times have no complete window and are dropped.
    """
    if n_steps < 1 or n_steps >= archive.n_times:
        raise ValueError("window longer than the archive")
    v = archive.values.astype(np.float64)
    c = np.concatenate([np.zeros_like(v[:, :1]), np.cumsum(v, axis=1)], axis=1)
    sums = c[:, 1 + n_steps:] - c[:, 1:-n_steps]
    out = np.empty_like(sums)
    for i, name in enumerate(archive.variables):
        out[i] = sums[i] if name in accumulated else sums[i] / n_steps
    return replace(archive, times=archive.times[: archive.n_times - n_steps], values=out,
                   attrs={**archive.attrs, "window_steps": n_steps})
