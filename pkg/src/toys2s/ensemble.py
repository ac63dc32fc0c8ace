"""Ensemble generation: Perlin-noise initial perturbations and model perturbation.

Every member draws from its own counter-seeded stream, keyed by
(seed base, init time, member id), so an ensemble is a pure function of its
inputs and members can be computed in any order.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .forecaster import MODEL_VARIABLES, SurrogateModel, rollout
from .gridstore import EnsembleHindcast, Grid, load_archive, write_archive

MODES = ("none", "ic", "model", "both")
# perturbing the structure of these variables hurts skill; model noise is off for them by default
DEFAULT_MODEL_SWITCH_OFF = ("t2m", "sst")


@dataclass(frozen=True)
class PerturbationConfig:
    mode: str = "both"
    amplitude: float = 0.1
    octaves: int = 3
    wavelength: float = 8.0
    persistence: float = 0.5
    ic_variables: tuple[str, ...] = MODEL_VARIABLES
    model_switch_off: tuple[str, ...] = DEFAULT_MODEL_SWITCH_OFF
    seed: int = 0
    control: bool = True
    mean_includes_control: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not (0 < self.persistence <= 1):
            raise ValueError("persistence must lie in (0, 1]")
        object.__setattr__(self, "ic_variables", tuple(self.ic_variables))
        object.__setattr__(self, "model_switch_off", tuple(self.model_switch_off))

    @property
    def perturbs_ic(self) -> bool:
        return self.mode in ("ic", "both")

    @property
    def perturbs_model(self) -> bool:
        return self.mode in ("model", "both")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ic_variables"] = list(self.ic_variables)
        d["model_switch_off"] = list(self.model_switch_off)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MemberSpec:
    member: int
    stream: tuple[int, int, int]
    records: list[dict] = field(default_factory=list)
    ok: bool = True
    n_valid: int | None = None


def member_rng(seed_base: int, init_time: int, member: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed_base, init_time, member])))


# ---------------------------------------------------------------------------
# Perlin noise


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _octave(nlat: int, nlon: int, wavelength: float, rng: np.random.Generator) -> np.ndarray:
    # lattice periodic in longitude: a whole number of cells around the circle
    nx = max(1, int(round(nlon / wavelength)))
    wl_lon = nlon / nx
    ny = int(math.ceil(nlat / wavelength)) + 1
    angles = rng.uniform(0.0, 2.0 * math.pi, size=(ny + 1, nx))
    gx, gy = np.cos(angles), np.sin(angles)
    # random lattice offset so no grid point is pinned to a lattice node
    ox, oy = rng.uniform(0.0, 1.0, size=2)
    x = np.arange(nlon) / wl_lon + ox
    y = np.arange(nlat) / wavelength + oy
    xi = np.floor(x).astype(int)
    yi = np.floor(y).astype(int)
    fx, fy = x - xi, y - yi
    x0, x1 = xi % nx, (xi + 1) % nx
    Y0, Y1 = yi[:, None], yi[:, None] + 1
    FX, FY = fx[None, :], fy[:, None]

    def dot(yy, xx, dx, dy):
        return gx[yy, xx] * dx + gy[yy, xx] * dy

    n00 = dot(Y0, x0[None, :], FX, FY)
    n10 = dot(Y0, x1[None, :], FX - 1.0, FY)
    n01 = dot(Y1, x0[None, :], FX, FY - 1.0)
    n11 = dot(Y1, x1[None, :], FX - 1.0, FY - 1.0)
    u, v = _fade(FX), _fade(FY)
    a = n00 + u * (n10 - n00)
    b = n01 + u * (n11 - n01)
    return a + v * (b - a)


def perlin_field(shape: tuple[int, int], config: PerturbationConfig | None = None,
                 seed: int | np.random.Generator = 0) -> np.ndarray:
    """Longitude-periodic gradient noise on a (lat, lon) grid, values in [-1, 1].

    Octave o uses wavelength/2**o cells and weight persistence**o; the sum is
    divided by its largest attainable magnitude.
    """
    config = config or PerturbationConfig()
    nlat, nlon = shape
    if nlat < 1 or nlon < 2 or max(nlat, nlon) < config.wavelength or nlon < config.wavelength:
        raise ValueError(f"grid {shape} is degenerate for base wavelength {config.wavelength}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = np.zeros(shape)
    bound = 0.0
    for o in range(config.octaves):
        wl = config.wavelength / 2 ** o
        if wl < 1.0:
            break
        weight = config.persistence ** o
        total += weight * _octave(nlat, nlon, wl, rng)
        bound += weight
    # single-octave 2-d gradient noise is bounded by sqrt(0.5)
    return total / (bound * math.sqrt(0.5))


def perturb_ic(snapshot, variables, config: PerturbationConfig, sigma: dict[str, float],
               rng: np.random.Generator, records: list | None = None) -> np.ndarray:
    """Add amplitude * sigma_clim(v) * unit-RMS Perlin noise to each listed variable."""
    snapshot = np.array(snapshot, dtype=np.float64, copy=True)
    if config.amplitude == 0.0:
        return snapshot
    shape = snapshot.shape[-2:]
    for i, v in enumerate(variables):
        if v not in config.ic_variables:
            continue
        if v not in sigma:
            raise KeyError(f"missing climatological sigma for {v!r}")
        noise = perlin_field(shape, config, rng)
        noise = noise / math.sqrt(float((noise * noise).mean()))
        snapshot[i] += config.amplitude * sigma[v] * noise
        if records is not None:
            records.append({"variable": v, "amplitude": config.amplitude * sigma[v]})
    return snapshot


def model_switch(model: SurrogateModel, config: PerturbationConfig) -> np.ndarray:
    return np.array([v not in config.model_switch_off for v in model.variables])


def generate_members(model: SurrogateModel, snapshot, init_time: int, grid: Grid, n_members: int,
                     n_steps: int, config: PerturbationConfig, sigma: dict[str, float],
                     member_ids=None):
    """Ensemble hindcast for one initialization.

    ``snapshot`` holds the model variables ``[nv, nlat, nlon]``.  Member 0 is
    the unperturbed control when ``config.control`` is set.  Returns the
    hindcast and the per-member specs; failed members are flagged there and
    left as NaN rather than aborting the batch.  ``member_ids`` overrides the
    stream id of each member (default 0..M-1).
    """
    if n_members < 1:
        raise ValueError("need at least one member")
    ids = list(range(n_members)) if member_ids is None else [int(i) for i in member_ids]
    if len(ids) != n_members or len(set(ids)) != n_members:
        raise ValueError("member ids must be distinct, one per member")
    snapshot = np.asarray(snapshot, dtype=np.float64)
    specs, starts, rngs = [], [], []
    for m in range(n_members):
        spec = MemberSpec(m, (config.seed, int(init_time), ids[m]))
        control = config.control and m == 0
        rng = member_rng(*spec.stream)
        x = snapshot
        if config.perturbs_ic and not control:
            x = perturb_ic(snapshot, model.variables, config, sigma, rng, spec.records)
        starts.append(x)
        rngs.append(rng if (config.perturbs_model and not control) else None)
        specs.append(spec)
    if any(r is not None for r in rngs):
        runner = model.with_switch(model_switch(model, config))
        streams = [r if r is not None else _NullStream() for r in rngs]
    else:
        runner, streams = model, None
    traj = rollout(runner, np.stack(starts), init_time, grid.lat, n_steps, streams)
    for spec, ok, nvalid in zip(specs, traj.ok, traj.n_valid):
        spec.ok, spec.n_valid = bool(ok), int(nvalid)
    values = np.moveaxis(traj.values, 2, 0)  # [var, member, lead, lat, lon]
    lead = 6 * np.arange(n_steps + 1)
    hc = EnsembleHindcast(grid, model.variables, init_time, lead, values,
                          attrs={"config_digest": config.digest(), "members": n_members})
    return hc, specs


class _NullStream:
    """Zero-noise stand-in for the control member inside a perturbed batch."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def ensemble_mean(hc: EnsembleHindcast, include_control: bool = True) -> np.ndarray:
    v = hc.values.astype(np.float64)
    if not include_control and hc.n_members > 1:
        v = v[:, 1:]
    return np.nanmean(v, axis=1)


# ---------------------------------------------------------------------------
# storage: one archive per member plus an ensemble manifest


def write_ensemble(hc: EnsembleHindcast, specs: list[MemberSpec], config: PerturbationConfig,
                   path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    members = []
    for m in range(hc.n_members):
        name = f"member_{m:03d}"
        write_archive(hc.member_archive(m), path / name)
        spec = specs[m]
        members.append({"member": m, "archive": name, "stream": list(spec.stream),
                        "ok": spec.ok, "n_valid": spec.n_valid, "records": spec.records})
    manifest = {"format_version": 1, "kind": "ensemble", "init_time": hc.init_time,
                "variables": list(hc.variables), "members": members,
                "config": config.to_dict(), "config_digest": config.digest()}
    (path / "ensemble.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_ensemble(path) -> EnsembleHindcast:
    path = Path(path)
    manifest = json.loads((path / "ensemble.json").read_text())
    if manifest.get("format_version") != 1 or manifest.get("kind") != "ensemble":
        raise ValueError(f"{path} is not a version-1 ensemble")
    archives = [load_archive(path / m["archive"]) for m in manifest["members"]]
    a0 = archives[0]
    values = np.stack([a.values for a in archives], axis=1)
    lead = a0.times - manifest["init_time"]
    return EnsembleHindcast(a0.grid, a0.variables, manifest["init_time"], lead, values,
                            attrs={"config_digest": manifest["config_digest"],
                                   "members": len(archives)})
