"""Autoregressive surrogate: per-subsystem encoders, exchange block, fuser, decoder.

The network is applied site by site on the ring grid: every grid point sees a
stencil of its zonal neighbours (``halo`` sites either side) for each input
variable, plus three auxiliary inputs (sin/cos of day-of-year, sin latitude)
that feed the fuser.  All sites share the weights.

Perturbation layers (stage 2) sit on every encoder output and on the fuser
output.  Each maps its features x to mu(x) + exp(logvar(x)/2) * eps with
affine mu and logvar maps; with the noise switched off the layer returns
mu(x).  Gradients are computed by hand and checked against finite
differences in the tests.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gridstore import HOURS_PER_DAY, STEP_HOURS, FieldArchive

MODEL_VARIABLES = ("z500", "t2m", "tp", "sst", "swvl")
LOGVAR_CLAMP = 10.0
SIGMA_INIT_LOGVAR = -6.0  # sigma = e^-3 at the start of stage 2
N_AUX = 3

MODES = {
    "V1": ((("atmosphere", ("z500", "t2m")),), False),
    "AOL": ((("surface", ("z500", "t2m", "tp", "sst", "swvl")),), False),
    "W2S": ((("atmosphere", ("z500", "t2m")), ("ocean", ("sst",)), ("land", ("swvl", "tp"))), True),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class NonFiniteGradient(RuntimeError):
    def __init__(self, layer):
        super().__init__(f"non-finite gradient in layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class Architecture:
    mode: str
    groups: tuple[tuple[str, tuple[str, ...]], ...]
    exchange: bool
    enc_width: int = 32
    fuser_width: int = 64
    halo: int = 2

    @property
    def variables(self) -> tuple[str, ...]:
        used = {v for _, vs in self.groups for v in vs}
        return tuple(v for v in MODEL_VARIABLES if v in used)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def stencil(self) -> int:
        return 2 * self.halo + 1

    def group_inputs(self, g: int) -> int:
        return len(self.groups[g][1]) * self.stencil

    @property
    def feature_width(self) -> int:
        return self.n_groups * self.enc_width

    def to_dict(self) -> dict:
        return {"mode": self.mode, "groups": [[n, list(v)] for n, v in self.groups],
                "exchange": self.exchange, "enc_width": self.enc_width,
                "fuser_width": self.fuser_width, "halo": self.halo}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["mode"], tuple((n, tuple(v)) for n, v in d["groups"]), d["exchange"],
                   d["enc_width"], d["fuser_width"], d["halo"])


def architecture(mode: str, enc_width: int = 32, fuser_width: int = 64, halo: int = 2,
                 exchange: bool | None = None) -> Architecture:
    """V1: atmosphere only.  AOL: one encoder over every variable, no exchange.
    W2S: atmosphere/ocean/land encoders with the exchange block."""
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    groups, ex = MODES[mode]
    return Architecture(mode, groups, ex if exchange is None else exchange, enc_width,
                        fuser_width, halo)


def expected_param_count(arch: Architecture, vae: bool) -> int:
    """Trainable weights: encoders, exchange off-diagonal blocks, fuser, decoder, VAE maps."""
    w, fw, G, nv = arch.enc_width, arch.fuser_width, arch.n_groups, len(arch.variables)
    n = sum(arch.group_inputs(g) * w + w for g in range(G))
    if arch.exchange:
        n += G * (G - 1) * w * w
    n += (G * w + N_AUX) * fw + fw
    n += fw * 2 * nv + 2 * nv
    if vae:
        n += G * 2 * (w * w + w) + 2 * (fw * fw + fw)
    return n


def _layer_names(arch: Architecture) -> list[str]:
    return [f"pert.{name}" for name, _ in arch.groups] + ["pert.fuser"]


@dataclass
class SurrogateModel:
    arch: Architecture
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    vae: bool = False
    switch: np.ndarray | None = None
    seed: int = 0
    loss: str = "nll"

    def __post_init__(self):
        nv = len(self.arch.variables)
        if self.switch is None:
            self.switch = np.ones(nv, dtype=bool)
        self.switch = np.asarray(self.switch, dtype=bool)
        if self.switch.shape != (nv,):
            raise ValueError("switch mask length must equal the number of variables")
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float64)

    @property
    def variables(self) -> tuple[str, ...]:
        return self.arch.variables

    def exchange_mask(self) -> np.ndarray:
        G, w = self.arch.n_groups, self.arch.enc_width
        return 1.0 - np.kron(np.eye(G), np.ones((w, w)))

    def trainable_count(self) -> int:
        n = 0
        for k, v in self.params.items():
            if k == "ex.E":
                n += int(self.exchange_mask().sum())
            else:
                n += v.size
        return n

    def copy(self) -> "SurrogateModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       switch=self.switch.copy())

    def with_switch(self, switch) -> "SurrogateModel":
        return replace(self, switch=np.asarray(switch, dtype=bool))


def init_model(arch: Architecture, seed: int, norm_mean=None, norm_std=None) -> SurrogateModel:
    rng = np.random.default_rng(seed)
    nv = len(arch.variables)
    w, fw, G = arch.enc_width, arch.fuser_width, arch.n_groups
    p = {}
    for g, (name, _) in enumerate(arch.groups):
        n_in = arch.group_inputs(g)
        p[f"enc.{name}.W"] = rng.standard_normal((n_in, w)) / math.sqrt(n_in)
        p[f"enc.{name}.b"] = np.zeros(w)
    if arch.exchange:
        p["ex.E"] = np.zeros((G * w, G * w))
    n_f = G * w + N_AUX
    p["fuser.W"] = rng.standard_normal((n_f, fw)) / math.sqrt(n_f)
    p["fuser.b"] = np.zeros(fw)
    p["dec.W"] = np.zeros((fw, 2 * nv))
    p["dec.b"] = np.zeros(2 * nv)
    norm_mean = np.zeros(nv) if norm_mean is None else norm_mean
    norm_std = np.ones(nv) if norm_std is None else norm_std
    return SurrogateModel(arch, p, norm_mean, norm_std, seed=seed)


def enable_perturbation(model: SurrogateModel, logvar: float = SIGMA_INIT_LOGVAR) -> SurrogateModel:
    """Add stage-2 perturbation maps: mu = identity, constant log-variance ``logvar``."""
    m = model.copy()
    w, fw = m.arch.enc_width, m.arch.fuser_width
    for layer, width in zip(_layer_names(m.arch), [w] * m.arch.n_groups + [fw]):
        m.params[f"{layer}.Wm"] = np.eye(width)
        m.params[f"{layer}.bm"] = np.zeros(width)
        m.params[f"{layer}.Ws"] = np.zeros((width, width))
        m.params[f"{layer}.bs"] = np.full(width, float(logvar))
    m.vae = True
    return m


# ---------------------------------------------------------------------------
# input assembly


def aux_features(times, lat) -> np.ndarray:
    """[B, R, 3]: sin/cos of day-of-year at ``times`` and sin(lat) per ring."""
    day = (np.asarray(times, dtype=np.float64) / HOURS_PER_DAY) % 360.0
    ang = 2.0 * math.pi * day / 360.0
    B, R = day.size, len(lat)
    out = np.empty((B, R, N_AUX))
    out[..., 0] = np.sin(ang)[:, None]
    out[..., 1] = np.cos(ang)[:, None]
    out[..., 2] = np.sin(np.deg2rad(np.asarray(lat, dtype=np.float64)))[None, :]
    return out


@dataclass
class Inputs:
    groups: list[np.ndarray]  # [N, n_in_g]
    aux: np.ndarray  # [N, 3]
    center: np.ndarray  # [N, nv] standardized current values
    shape: tuple[int, int, int]  # (B, R, K)


def build_inputs(model: SurrogateModel, z, times, lat) -> Inputs:
    """Rows for every (sample, ring, site) from standardized snapshots ``z[B, nv, R, K]``."""
    arch = model.arch
    B, nv, R, K = z.shape
    if nv != len(arch.variables):
        raise ValueError(f"snapshot carries {nv} variables, model expects {len(arch.variables)}")
    vidx = {v: i for i, v in enumerate(arch.variables)}
    offsets = np.arange(-arch.halo, arch.halo + 1)
    site_idx = (np.arange(K)[:, None] + offsets[None, :]) % K  # [K, S]
    zt = np.moveaxis(z, 1, -1)  # [B, R, K, nv]
    st = zt[:, :, site_idx, :]  # [B, R, K, S, nv]
    groups = []
    for _, vs in arch.groups:
        cols = st[..., [vidx[v] for v in vs]]  # [B, R, K, S, nvg]
        groups.append(np.ascontiguousarray(np.swapaxes(cols, -1, -2).reshape(B * R * K, -1)))
    aux = np.broadcast_to(aux_features(times, lat)[:, :, None, :], (B, R, K, N_AUX))
    return Inputs(groups, aux.reshape(-1, N_AUX), zt.reshape(-1, nv), (B, R, K))


def standardize(model: SurrogateModel, x) -> np.ndarray:
    return (x - model.norm_mean[None, :, None, None]) / model.norm_std[None, :, None, None]


def destandardize(model: SurrogateModel, z) -> np.ndarray:
    return z * model.norm_std[None, :, None, None] + model.norm_mean[None, :, None, None]


# ---------------------------------------------------------------------------
# forward / backward on rows


def draw_eps(model: SurrogateModel, n_rows: int, rng: np.random.Generator) -> list[np.ndarray]:
    w, fw = model.arch.enc_width, model.arch.fuser_width
    widths = [w] * model.arch.n_groups + [fw]
    return [rng.standard_normal((n_rows, k)) for k in widths]


def _perturb(p, layer, x, eps, cache, tag):
    mu = x @ p[f"{layer}.Wm"] + p[f"{layer}.bm"]
    s_raw = x @ p[f"{layer}.Ws"] + p[f"{layer}.bs"]
    s = np.clip(s_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if eps is None:
        out = mu
        sig = None
    else:
        sig = np.exp(0.5 * s)
        out = mu + sig * eps
    if cache is not None:
        cache[tag] = (x, mu, s_raw, s, sig, eps)
    return out


def forward_rows(model: SurrogateModel, inp: Inputs, eps: list[np.ndarray] | None = None,
                 cache: dict | None = None):
    """Mean (standardized next state) and clamped log-variance per row.

    ``eps`` supplies the perturbation noise per layer; None means the noise is
    off (layers return their mean map, or pass through before stage 2).
    """
    p, arch = model.params, model.arch
    hs = []
    for g, (name, _) in enumerate(arch.groups):
        hs.append(np.tanh(inp.groups[g] @ p[f"enc.{name}.W"] + p[f"enc.{name}.b"]))
    H = np.concatenate(hs, axis=1)
    if arch.exchange:
        U = H + H @ (p["ex.E"] * model.exchange_mask())
    else:
        U = H
    w = arch.enc_width
    zs = []
    for g, layer in enumerate(_layer_names(arch)[:-1]):
        u = U[:, g * w:(g + 1) * w]
        if model.vae:
            u = _perturb(p, layer, u, None if eps is None else eps[g], cache, layer)
        zs.append(u)
    Zin = np.concatenate(zs + [inp.aux], axis=1)
    f = np.tanh(Zin @ p["fuser.W"] + p["fuser.b"])
    q = f
    if model.vae:
        q = _perturb(p, "pert.fuser", f, None if eps is None else eps[-1], cache, "pert.fuser")
    o = q @ p["dec.W"] + p["dec.b"]
    nv = len(arch.variables)
    mean = inp.center + o[:, :nv]
    lv_raw = o[:, nv:]
    logvar = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if cache is not None:
        cache.update(inp=inp, hs=hs, H=H, U=U, Zin=Zin, f=f, q=q, lv_raw=lv_raw,
                     mean=mean, logvar=logvar, eps=eps)
    return mean, logvar


def p_loss(mean, logvar, truth, kind: str = "nll") -> float:
    """Gaussian negative log-likelihood 0.5*[(m-y)^2 e^-s + s], averaged over elements."""
    mean, logvar, truth = (np.asarray(a, dtype=np.float64) for a in (mean, logvar, truth))
    if not (np.isfinite(mean).all() and np.isfinite(logvar).all() and np.isfinite(truth).all()):
        raise ValueError("non-finite inputs to p_loss")
    r2 = (mean - truth) ** 2
    if kind == "mse":
        return float(0.5 * r2.mean())
    return float(0.5 * (r2 * np.exp(-logvar) + logvar).mean())


def kl_loss(mu, logvar) -> float:
    """KL divergence of N(mu, e^logvar) from N(0, 1): sum over features, mean over rows."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    return float((0.5 * (mu * mu + np.exp(logvar) - logvar - 1.0)).sum(axis=-1).mean())


@dataclass
class LossBreakdown:
    total: float
    p_loss: float
    kl: list[float]
    lam: float

    @property
    def kl_sum(self) -> float:
        return float(sum(self.kl))


def loss_terms(model: SurrogateModel, cache: dict, truth, lam: float) -> LossBreakdown:
    pl = p_loss(cache["mean"], cache["logvar"], truth, model.loss)
    kls = []
    if model.vae:
        for layer in _layer_names(model.arch):
            _, mu, _, s, _, _ = cache[layer]
            kls.append(kl_loss(mu, s))
    total = pl + lam * sum(kls)
    return LossBreakdown(total, pl, kls, lam)


def _check(name, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteGradient(name)
    return arr


def backward(model: SurrogateModel, cache: dict, truth, lam: float) -> tuple[dict, LossBreakdown]:
    """Gradients of P_loss + lam * sum(KL) for every parameter, from a cached forward."""
    p, arch = model.params, model.arch
    inp: Inputs = cache["inp"]
    mean, logvar, lv_raw = cache["mean"], cache["logvar"], cache["lv_raw"]
    truth = np.asarray(truth, dtype=np.float64)
    N, nv = mean.shape
    scale = 1.0 / (N * nv)
    r = mean - truth
    g = {}
    if model.loss == "mse":
        dmean = r * scale
        dlv = np.zeros_like(logvar)
    else:
        inv = np.exp(-logvar)
        dmean = r * inv * scale
        dlv = 0.5 * (1.0 - r * r * inv) * scale
        dlv = dlv * (np.abs(lv_raw) < LOGVAR_CLAMP)
    do = np.concatenate([dmean, dlv], axis=1)
    q = cache["q"]
    g["dec.W"] = q.T @ do
    g["dec.b"] = do.sum(axis=0)
    dq = do @ p["dec.W"].T

    def perturb_back(layer, dout):
        x, mu, s_raw, s, sig, eps = cache[layer]
        rows = x.shape[0]
        dmu = dout + lam * mu / rows
        ds = lam * 0.5 * (np.exp(s) - 1.0) / rows
        if eps is not None:
            ds = ds + dout * eps * 0.5 * sig
        ds = ds * (np.abs(s_raw) < LOGVAR_CLAMP)
        g[f"{layer}.Wm"] = x.T @ dmu
        g[f"{layer}.bm"] = dmu.sum(axis=0)
        g[f"{layer}.Ws"] = x.T @ ds
        g[f"{layer}.bs"] = ds.sum(axis=0)
        return dmu @ p[f"{layer}.Wm"].T + ds @ p[f"{layer}.Ws"].T

    df = perturb_back("pert.fuser", dq) if model.vae else dq
    f = cache["f"]
    daf = df * (1.0 - f * f)
    g["fuser.W"] = cache["Zin"].T @ daf
    g["fuser.b"] = daf.sum(axis=0)
    dZ = daf @ p["fuser.W"].T
    w = arch.enc_width
    dU = np.empty_like(cache["U"])
    for gi, layer in enumerate(_layer_names(arch)[:-1]):
        dz = dZ[:, gi * w:(gi + 1) * w]
        dU[:, gi * w:(gi + 1) * w] = perturb_back(layer, dz) if model.vae else dz
    if arch.exchange:
        mask = model.exchange_mask()
        g["ex.E"] = (cache["H"].T @ dU) * mask
        dH = dU + dU @ (p["ex.E"] * mask).T
    else:
        dH = dU
    for gi, (name, _) in enumerate(arch.groups):
        h = cache["hs"][gi]
        da = dH[:, gi * w:(gi + 1) * w] * (1.0 - h * h)
        g[f"enc.{name}.W"] = inp.groups[gi].T @ da
        g[f"enc.{name}.b"] = da.sum(axis=0)
    for k, v in g.items():
        _check(k, v)
    return g, loss_terms(model, cache, truth, lam)


# ---------------------------------------------------------------------------
# snapshot-level API


def forward(model: SurrogateModel, snapshot, times, lat, rng: np.random.Generator | None = None):
    """One step from physical snapshots ``[B, nv, R, K]`` valid at ``times``.

    With ``rng`` the perturbation layers draw fresh noise; variables whose
    switch is off take the unperturbed prediction.  Returns the physical mean
    and the standardized log-variance, both ``[B, nv, R, K]``.
    """
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.ndim == 3:
        snapshot = snapshot[None]
        times = np.atleast_1d(times)
    z = standardize(model, snapshot)
    z_next, logvar = _forward_std(model, z, np.atleast_1d(times), lat, rng)
    return destandardize(model, z_next), logvar


def _forward_std(model, z, times, lat, rng):
    inp = build_inputs(model, z, times, lat)
    B, R, K = inp.shape
    nv = z.shape[1]
    mean, logvar = forward_rows(model, inp)
    if rng is not None and model.vae and model.switch.any():
        eps = draw_eps(model, mean.shape[0], rng)
        pmean, plv = forward_rows(model, inp, eps)
        mean = np.where(model.switch[None, :], pmean, mean)
        logvar = np.where(model.switch[None, :], plv, logvar)

    def grid(a):
        return np.moveaxis(a.reshape(B, R, K, nv), -1, 1)

    return grid(mean), grid(logvar)


@dataclass
class Trajectory:
    values: np.ndarray  # [B, n_steps + 1, nv, R, K], index 0 = initial snapshot
    ok: np.ndarray  # [B] False where the rollout hit a non-finite state
    n_valid: np.ndarray  # [B] number of valid frames


def rollout(model: SurrogateModel, snapshot, init_times, lat, n_steps: int,
            rngs: list[np.random.Generator] | None = None) -> Trajectory:
    """Feed each mean prediction back as input for ``n_steps`` steps.

    ``rngs`` gives each batch member its own noise stream; None disables
    model perturbation.  Non-finite members are frozen at NaN and flagged.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.ndim == 3:
        snapshot = snapshot[None]
    B = snapshot.shape[0]
    init_times = np.broadcast_to(np.asarray(init_times, dtype=np.int64), (B,))
    if rngs is not None and len(rngs) != B:
        raise ValueError("one rng stream per batch member")
    out = np.empty((B, n_steps + 1) + snapshot.shape[1:])
    out[:, 0] = snapshot
    z = standardize(model, snapshot)
    ok = np.isfinite(z).reshape(B, -1).all(axis=1)
    n_valid = np.full(B, n_steps + 1)
    for step in range(1, n_steps + 1):
        times = init_times + STEP_HOURS * (step - 1)
        if rngs is None:
            z, _ = _forward_std(model, z, times, lat, None)
        else:
            z = _perturbed_step(model, z, times, lat, rngs)
        finite = np.isfinite(z).reshape(B, -1).all(axis=1)
        newly_bad = ok & ~finite
        n_valid[newly_bad] = step
        ok &= finite
        z[~ok] = np.nan
        out[:, step] = destandardize(model, z)
    return Trajectory(out, ok, n_valid)


def _perturbed_step(model, z, times, lat, rngs):
    # noise drawn member by member from its own stream; the batch is then evaluated at once
    inp = build_inputs(model, z, times, lat)
    B, R, K = inp.shape
    nv = z.shape[1]
    mean, _ = forward_rows(model, inp)
    if model.vae and model.switch.any():
        rows = R * K
        per = [draw_eps(model, rows, r) for r in rngs]
        eps = [np.concatenate([e[i] for e in per], axis=0) for i in range(len(per[0]))]
        pmean, _ = forward_rows(model, inp, eps)
        mean = np.where(model.switch[None, :], pmean, mean)
    return np.moveaxis(mean.reshape(B, R, K, nv), -1, 1)


# ---------------------------------------------------------------------------
# optimizer and training


class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, params: dict, lr=5e-4, beta1=0.9, beta2=0.9, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, gk in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * gk
            v *= self.b2
            v += (1.0 - self.b2) * gk * gk
            if self.wd:
                params[k] -= self.lr * self.wd * params[k]
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 4
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 0.0
    lam: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    mode: str = "W2S"
    train_years: tuple[int, int] = (0, 7)
    enc_width: int = 32
    fuser_width: int = 64
    halo: int = 2
    loss: str = "nll"
    batches_per_epoch: int | None = None
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over each stage
    sigma_init_logvar: float = SIGMA_INIT_LOGVAR

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        object.__setattr__(self, "train_years", tuple(self.train_years))


@dataclass
class HistoryRow:
    stage: int
    epoch: int
    total: float
    p_loss: float
    kl: float


def history_csv(history: list[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "epoch", "total", "p_loss", "kl"])
    for h in history:
        w.writerow([h.stage, h.epoch, repr(h.total), repr(h.p_loss), repr(h.kl)])
    return buf.getvalue()


def training_pairs(truth: FieldArchive, variables, years) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical fields [T, nv, R, K] of the training years, their times, and
    the indices t whose successor t+1 is also inside the training span."""
    sub = truth.select_years(*years).select_variables(variables)
    if sub.n_times < 2:
        raise ValueError("archive too short for one-step training pairs")
    data = np.moveaxis(sub.values.astype(np.float64), 0, 1)
    return data, sub.times, np.arange(sub.n_times - 1)


def train(truth: FieldArchive, config: TrainConfig, model: SurrogateModel | None = None,
          log=None) -> tuple[SurrogateModel, list[HistoryRow]]:
    """Two-stage training: P_loss only, then P_loss + lam * sum(KL) with noise on."""
    arch = architecture(config.mode, config.enc_width, config.fuser_width, config.halo)
    data, times, starts = training_pairs(truth, arch.variables, config.train_years)
    mean = data.mean(axis=(0, 2, 3))
    std = data.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    if model is None:
        model = init_model(arch, config.seed, mean, std)
    model = replace(model, loss=config.loss)
    z = (data - mean[None, :, None, None]) / std[None, :, None, None]
    lat = truth.grid.lat
    rng = np.random.default_rng(config.seed)
    history: list[HistoryRow] = []

    def run_stage(model, stage, epochs):
        opt = AdamW(model.params, config.lr, config.beta1, config.beta2,
                    weight_decay=config.weight_decay)
        lam = config.lam if stage == 2 else 0.0
        nb = len(starts) // config.batch_size
        if config.batches_per_epoch is not None:
            nb = min(nb, config.batches_per_epoch)
        total_steps = max(nb * epochs, 1)
        for epoch in range(epochs):
            order = rng.permutation(starts)
            acc = np.zeros(3)
            for b in range(nb):
                if config.lr_schedule == "cosine":
                    t = (epoch * nb + b) / total_steps
                    opt.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * t))
                idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
                inp = build_inputs(model, z[idx], times[idx], lat)
                target = np.moveaxis(z[idx + 1], 1, -1).reshape(-1, z.shape[1])
                eps = draw_eps(model, inp.center.shape[0], rng) if stage == 2 else None
                cache = {}
                forward_rows(model, inp, eps, cache)
                try:
                    grads, terms = backward(model, cache, target, lam)
                except NonFiniteGradient as exc:
                    raise TrainingDiverged(str(exc), history) from exc
                if not math.isfinite(terms.total):
                    raise TrainingDiverged("loss became non-finite", history)
                opt.step(model.params, grads)
                acc += (terms.total, terms.p_loss, terms.kl_sum)
            acc /= max(nb, 1)
            history.append(HistoryRow(stage, epoch, *map(float, acc)))
            if log is not None:
                log(f"stage {stage} epoch {epoch}: loss {acc[0]:.5f} (P {acc[1]:.5f}, KL {acc[2]:.3f})")
        return model

    model = run_stage(model, 1, config.stage1_epochs)
    if config.stage2_epochs > 0:
        model = enable_perturbation(model, config.sigma_init_logvar)
        model = run_stage(model, 2, config.stage2_epochs)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints: JSON header + raw little-endian float64 payload


def save_checkpoint(model: SurrogateModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(model.params)
    payload = np.concatenate([model.params[n].ravel() for n in names]) if names else np.zeros(0)
    (path / "params.f64").write_bytes(payload.astype("<f8").tobytes())
    header = {
        "format_version": 1,
        "kind": "surrogate_checkpoint",
        "architecture": model.arch.to_dict(),
        "mode": model.arch.mode,
        "seed": model.seed,
        "vae": model.vae,
        "loss": model.loss,
        "switch": model.switch.astype(int).tolist(),
        "variables": list(model.variables),
        "norm_mean": model.norm_mean.tolist(),
        "norm_std": model.norm_std.tolist(),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "dtype": "float64",
        "byte_order": "little",
    }
    (path / "manifest.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> SurrogateModel:
    path = Path(path)
    header = json.loads((path / "manifest.json").read_text())
    if header.get("format_version") != 1 or header.get("kind") != "surrogate_checkpoint":
        raise ValueError(f"{path} is not a version-1 surrogate checkpoint")
    raw = np.frombuffer((path / "params.f64").read_bytes(), dtype="<f8")
    need = sum(int(np.prod(p["shape"])) for p in header["params"])
    if raw.size != need:
        raise ValueError("checkpoint payload size does not match its header")
    params, off = {}, 0
    for p in header["params"]:
        n = int(np.prod(p["shape"]))
        params[p["name"]] = raw[off:off + n].reshape(p["shape"]).astype(np.float64)
        off += n
    return SurrogateModel(Architecture.from_dict(header["architecture"]), params,
                          np.array(header["norm_mean"]), np.array(header["norm_std"]),
                          vae=header["vae"], switch=np.array(header["switch"], dtype=bool),
                          seed=header["seed"], loss=header.get("loss", "nll"))
