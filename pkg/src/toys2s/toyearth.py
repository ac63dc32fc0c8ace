"""Coupled two-scale Lorenz-96 toy Earth with slow ocean and land reservoirs.

Each of R latitude rings carries K slow atmosphere sites X, K*J fast modes Y,
an ocean O relaxing towards gamma*X and a land-moisture store L fed by
threshold precipitation.  Model time runs at ``units_per_step`` per 6 hours.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .gridstore import HOURS_PER_DAY, HOURS_PER_YEAR, STEP_HOURS, STEPS_PER_DAY, FieldArchive, Grid

TRUTH_VARIABLES = ("z500", "t2m", "tp", "olr", "sst", "swvl")
BLOWUP = 1e6
L_UNDERSHOOT_TOL = 1e-9


class IntegrationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyParams:
    K: int = 36
    J: int = 10
    R: int = 8
    F: tuple[float, ...] | float = 8.0
    h: float = 1.0
    b: float = 10.0
    c: float = 10.0
    tau_o_days: float = 90.0
    gamma: float = 0.8
    tau_l_days: float = 10.0
    x_p: float = 1.0
    dt: float = 0.005
    units_per_step: float = 0.05
    seasonal_amplitude: float = 0.1
    spinup_years: float = 1.0

    def __post_init__(self):
        F = np.broadcast_to(np.asarray(self.F, dtype=np.float64), (self.R,))
        object.__setattr__(self, "F", tuple(float(f) for f in F))
        if self.K < 4 or self.J < 3 or self.R < 1:
            raise ValueError("need K >= 4, J >= 3, R >= 1")
        if not (self.tau_o_days > self.tau_l_days > 0):
            raise ValueError("require tau_o > tau_l > 0")
        if self.dt <= 0 or self.units_per_step <= 0:
            raise ValueError("dt and units_per_step must be positive")
        n = self.units_per_step / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("units_per_step must be a whole number of integrator steps")

    @property
    def units_per_day(self) -> float:
        return self.units_per_step * STEPS_PER_DAY

    @property
    def tau_o(self) -> float:
        return self.tau_o_days * self.units_per_day

    @property
    def tau_l(self) -> float:
        return self.tau_l_days * self.units_per_day

    @property
    def substeps(self) -> int:
        return int(round(self.units_per_step / self.dt))

    @property
    def forcing(self) -> np.ndarray:
        return np.array(self.F)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["F"] = list(self.F)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyParams":
        d = dict(d)
        if "F" in d and isinstance(d["F"], list):
            d["F"] = tuple(d["F"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ToyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class ToyState:
    X: np.ndarray
    Y: np.ndarray
    O: np.ndarray
    L: np.ndarray

    def arrays(self):
        return self.X, self.Y, self.O, self.L

    def check(self, params: ToyParams) -> None:
        R, K, J = params.R, params.K, params.J
        if self.X.shape != (R, K) or self.O.shape != (R, K) or self.L.shape != (R, K):
            raise ValueError("slow fields must be shaped [R, K]")
        if self.Y.shape != (R, K * J):
            raise ValueError("fast field must be shaped [R, K*J]")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise IntegrationDiverged("non-finite state")


def ring_latitudes(R: int) -> np.ndarray:
    """Evenly spaced ring latitudes avoiding the poles; R=8 gives +-10, 30, 50, 70."""
    return -80.0 + 160.0 * (np.arange(R) + 0.5) / R


def toy_grid(params: ToyParams) -> Grid:
    return Grid(ring_latitudes(params.R), np.arange(params.K) * (360.0 / params.K))


def seasonal_forcing(params: ToyParams, hours) -> np.ndarray:
    """Per-ring forcing at ``hours``; hemispheres are in opposite seasonal phase."""
    phase = np.where(ring_latitudes(params.R) > 0, 0.0, math.pi)
    day = (np.asarray(hours, dtype=np.float64) / HOURS_PER_DAY) % 360.0
    angle = 2.0 * math.pi * day / 360.0
    return params.forcing * (1.0 + params.seasonal_amplitude * np.sin(angle + phase))


def tendency(state: ToyState, params: ToyParams, forcing=None) -> ToyState:
    """Time derivative of every state component (pure; the state is not touched)."""
    state.check(params)
    X, Y, O, L = state.arrays()
    R, K, J = params.R, params.K, params.J
    F = params.forcing if forcing is None else np.asarray(forcing, dtype=np.float64)
    hcb = params.h * params.c / params.b
    dX = (-np.roll(X, 1, axis=1) * (np.roll(X, 2, axis=1) - np.roll(X, -1, axis=1))
          - X + F[:, None] - hcb * Y.reshape(R, K, J).sum(axis=2) + params.gamma * O)
    dY = (-params.c * params.b * np.roll(Y, -1, axis=1) * (np.roll(Y, -2, axis=1) - np.roll(Y, 1, axis=1))
          - params.c * Y + hcb * np.repeat(X, J, axis=1))
    dO = (params.gamma * X - O) / params.tau_o
    P = np.maximum(0.0, X - params.x_p)
    dL = (P - L) / params.tau_l
    return ToyState(dX, dY, dO, dL)


def _axpy(s: ToyState, k: ToyState, a: float) -> ToyState:
    return ToyState(s.X + a * k.X, s.Y + a * k.Y, s.O + a * k.O, s.L + a * k.L)


def _finish(state: ToyState) -> ToyState:
    for a in state.arrays():
        if not np.isfinite(a).all() or np.abs(a).max() > BLOWUP:
            raise IntegrationDiverged("integration diverged (|value| > 1e6)")
    L = state.L
    if L.min() < -L_UNDERSHOOT_TOL:
        raise IntegrationDiverged(f"land moisture undershoot {L.min():.3g}")
    return replace(state, L=np.maximum(L, 0.0))


def step_rk4(state: ToyState, params: ToyParams, forcing=None, dt: float | None = None) -> ToyState:
    """One classical Runge-Kutta step of length ``dt`` (default params.dt)."""
    dt = params.dt if dt is None else dt
    k1 = tendency(state, params, forcing)
    k2 = tendency(_axpy(state, k1, 0.5 * dt), params, forcing)
    k3 = tendency(_axpy(state, k2, 0.5 * dt), params, forcing)
    k4 = tendency(_axpy(state, k3, dt), params, forcing)
    out = ToyState(*(s + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                     for s, a, b, c, d in zip(state.arrays(), k1.arrays(), k2.arrays(),
                                              k3.arrays(), k4.arrays())))
    return _finish(out)


# ---------------------------------------------------------------------------
# compiled integrator used for long runs; checked against step_rk4 in the tests


@numba.njit(cache=True)
def _tend_nb(X, Y, O, L, F, hcb, cb, c, gamma, tau_o, tau_l, xp, dX, dY, dO, dL):
    R, K = X.shape
    KJ = Y.shape[1]
    J = KJ // K
    for r in range(R):
        for k in range(K):
            s = 0.0
            for j in range(J):
                s += Y[r, k * J + j]
            dX[r, k] = (-X[r, (k - 1) % K] * (X[r, (k - 2) % K] - X[r, (k + 1) % K])
                        - X[r, k] + F[r] - hcb * s + gamma * O[r, k])
            dO[r, k] = (gamma * X[r, k] - O[r, k]) / tau_o
            p = X[r, k] - xp
            if p < 0.0:
                p = 0.0
            dL[r, k] = (p - L[r, k]) / tau_l
        for j in range(KJ):
            dY[r, j] = (-cb * Y[r, (j + 1) % KJ] * (Y[r, (j + 2) % KJ] - Y[r, (j - 1) % KJ])
                        - c * Y[r, j] + hcb * X[r, j // J])


@numba.njit(cache=True)
def _combine(dst, src, a, k, dt):
    flat_d = dst.ravel()
    flat_s = src.ravel()
    flat_k = k.ravel()
    for i in range(flat_d.size):
        flat_d[i] = flat_s[i] + a * dt * flat_k[i]


@numba.njit(cache=True)
def _rk4_nb(X, Y, O, L, F, nsub, dt, hcb, cb, c, gamma, tau_o, tau_l, xp):
    R, K = X.shape
    KJ = Y.shape[1]
    kX = np.empty((4, R, K))
    kY = np.empty((4, R, KJ))
    kO = np.empty((4, R, K))
    kL = np.empty((4, R, K))
    tX = np.empty((R, K))
    tY = np.empty((R, KJ))
    tO = np.empty((R, K))
    tL = np.empty((R, K))
    for _ in range(nsub):
        _tend_nb(X, Y, O, L, F, hcb, cb, c, gamma, tau_o, tau_l, xp, kX[0], kY[0], kO[0], kL[0])
        for stage, a in ((1, 0.5), (2, 0.5), (3, 1.0)):
            _combine(tX, X, a, kX[stage - 1], dt)
            _combine(tY, Y, a, kY[stage - 1], dt)
            _combine(tO, O, a, kO[stage - 1], dt)
            _combine(tL, L, a, kL[stage - 1], dt)
            _tend_nb(tX, tY, tO, tL, F, hcb, cb, c, gamma, tau_o, tau_l, xp,
                     kX[stage], kY[stage], kO[stage], kL[stage])
        for r in range(R):
            for j in range(KJ):
                Y[r, j] = Y[r, j] + dt / 6.0 * (kY[0, r, j] + 2.0 * kY[1, r, j]
                                                 + 2.0 * kY[2, r, j] + kY[3, r, j])
            for j in range(K):
                X[r, j] = X[r, j] + dt / 6.0 * (kX[0, r, j] + 2.0 * kX[1, r, j]
                                                 + 2.0 * kX[2, r, j] + kX[3, r, j])
                O[r, j] = O[r, j] + dt / 6.0 * (kO[0, r, j] + 2.0 * kO[1, r, j]
                                                 + 2.0 * kO[2, r, j] + kO[3, r, j])
                v = L[r, j] + dt / 6.0 * (kL[0, r, j] + 2.0 * kL[1, r, j]
                                          + 2.0 * kL[2, r, j] + kL[3, r, j])
                if v < 0.0 and v >= -1e-9:
                    v = 0.0
                L[r, j] = v


def advance(state: ToyState, params: ToyParams, n_sub: int, forcing=None) -> ToyState:
    """``n_sub`` RK4 steps with the compiled kernel (forcing held fixed)."""
    F = params.forcing if forcing is None else np.asarray(forcing, dtype=np.float64)
    X, Y, O, L = (np.array(a, dtype=np.float64, copy=True) for a in state.arrays())
    _rk4_nb(X, Y, O, L, np.ascontiguousarray(F), n_sub, params.dt, params.h * params.c / params.b,
            params.c * params.b, params.c, params.gamma, params.tau_o, params.tau_l, params.x_p)
    return _finish(ToyState(X, Y, O, L))


# ---------------------------------------------------------------------------
# observation and truth generation


def observe(state: ToyState, params: ToyParams) -> np.ndarray:
    """Snapshot ``[variable, R, K]`` in TRUTH_VARIABLES order."""
    X, _, O, L = state.arrays()
    if X.shape != (params.R, params.K):
        raise ValueError("state does not match the ring/site mapping")
    P = np.maximum(0.0, X - params.x_p)
    return np.stack([X, X + 0.5 * O + 0.25 * L, P, 2.0 - P, O, L])


def initial_state(params: ToyParams, seed: int) -> ToyState:
    rng = np.random.default_rng(seed)
    R, K, J = params.R, params.K, params.J
    X = params.forcing[:, None] + rng.standard_normal((R, K))
    Y = 0.1 * rng.standard_normal((R, K * J))
    O = params.gamma * np.full((R, K), 2.5)
    L = np.zeros((R, K))
    return ToyState(X, Y, O, L)


def integrate(state: ToyState, params: ToyParams, start_hours: int, n_steps: int,
              record: bool = True):
    """Advance ``n_steps`` 6-hour steps from ``start_hours``.

    Returns the final state and, if ``record``, the snapshots at
    start_hours + 6h*i for i in 0..n_steps-1 (each taken before its step).
    """
    out = np.empty((n_steps, len(TRUTH_VARIABLES), params.R, params.K)) if record else None
    for i in range(n_steps):
        t = start_hours + STEP_HOURS * i
        if record:
            out[i] = observe(state, params)
        state = advance(state, params, params.substeps, seasonal_forcing(params, t))
    return state, out


def gen_truth(params: ToyParams, years: int, seed: int, start_year: int = 0) -> FieldArchive:
    """6-hourly truth over ``years`` calendar years after discarding the spin-up."""
    if params.spinup_years < 1:
        raise ValueError("spin-up must be at least one model year")
    steps_per_year = HOURS_PER_YEAR // STEP_HOURS
    n_spin = int(round(params.spinup_years * steps_per_year))
    t0 = start_year * HOURS_PER_YEAR
    state = initial_state(params, seed)
    state, _ = integrate(state, params, t0 - n_spin * STEP_HOURS, n_spin, record=False)
    _, snaps = integrate(state, params, t0, years * steps_per_year)
    times = t0 + STEP_HOURS * np.arange(years * steps_per_year, dtype=np.int64)
    values = np.moveaxis(snaps, 0, 1)
    return FieldArchive(toy_grid(params), TRUTH_VARIABLES, times, values,
                        attrs={"source": "toyearth", "seed": int(seed),
                               "params": params.to_dict()})


def lyapunov_estimate(params: ToyParams, seed: int, n_steps: int = 40, eps: float = 1e-8,
                      spinup_steps: int = 400) -> float:
    """Leading Lyapunov exponent (per day) from a twin run with renormalization."""
    state = initial_state(params, seed)
    state, _ = integrate(state, params, 0, spinup_steps, record=False)
    rng = np.random.default_rng(seed + 1)
    d = rng.standard_normal(state.X.shape)
    twin = replace(state, X=state.X + eps * d / np.linalg.norm(d))
    total = 0.0
    for i in range(n_steps):
        F = seasonal_forcing(params, STEP_HOURS * (spinup_steps + i))
        state = advance(state, params, params.substeps, F)
        twin = advance(twin, params, params.substeps, F)
        diff = [b - a for a, b in zip(state.arrays(), twin.arrays())]
        norm = math.sqrt(sum(float((x * x).sum()) for x in diff))
        total += math.log(norm / eps)
        twin = ToyState(*(a + eps * x / norm for a, x in zip(state.arrays(), diff)))
    return total / (n_steps / STEPS_PER_DAY)
