"""Nonlinear batch reactor with consecutive reactions A -> B -> C.

States are ordered ``(C_A, C_B, T, T_J)``: reactant and product concentrations
[mol/L], reactor temperature [K] and jacket temperature [K]. The manipulated
input is the cooling-water flow ``F_ow`` [L/s] and the disturbance is the
deviation of the cooling-water inlet temperature from its nominal value [K].

Time base is seconds. Two unit conversions happen inside the right-hand side:

* ``h_ow`` is tabulated per minute and is divided by 60.
* The Arrhenius pre-factors are tabulated per kinetic time unit
  (``ReactorParams.kinetic_time_scale`` seconds, one hour by default), so the
  reaction rates are divided by that scale.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConstraintError, DomainError, IntegrationError

log = logging.getLogger(__name__)

N_X = 4
N_U = 1
N_D = 1
N_Z = 2
N_Y = 2

U_MIN = 0.0
U_MAX = 10.0

STATE_NAMES = ("C_A", "C_B", "T", "T_J")
OBS_INDEX = (2, 3)
QUALITY_INDEX = (0, 1)

# RNG stream tags; one independent stream per noise source
_STREAM_DRIFT = 1
_STREAM_WITHIN = 2
_STREAM_MEAS = 3


@dataclass(frozen=True)
class ReactorParams:
    """Physical constants of the reactor (defaults are the published values)."""

    alpha1: float = 4000.0
    alpha2: float = 6.2e5
    E1: float = 5000.0
    E2: float = 10000.0
    R: float = 2.0
    V: float = 1200.0
    V_J: float = 1200.0
    lambda1: float = -1.8e5
    lambda2: float = -2.25e5
    C_p: float = 1000.0
    C_J: float = 1000.0
    rho: float = 0.8
    rho_J: float = 0.8
    A_o: float = 525.0
    h_ow: float = 10850.0
    T_j0_nominal: float = 323.0
    T_j0_actual: float = 318.0
    kinetic_time_scale: float = 3600.0

    def validate(self):
        for name in ("alpha1", "alpha2", "E1", "E2", "R", "V", "V_J", "C_p", "C_J",
                     "rho", "rho_J", "A_o", "h_ow", "T_j0_nominal", "T_j0_actual",
                     "kinetic_time_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value}")
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value < 0):
                raise DomainError(f"{name} must be finite and < 0, got {value}")

    @property
    def offset(self) -> float:
        """Deterministic inlet-temperature offset of the actual plant [K]."""
        return self.T_j0_actual - self.T_j0_nominal


@dataclass(frozen=True)
class ReactorState:
    C_A: float
    C_B: float
    T: float
    T_J: float

    def as_array(self) -> np.ndarray:
        return np.array([self.C_A, self.C_B, self.T, self.T_J], dtype=float)

    @classmethod
    def from_array(cls, x) -> "ReactorState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))

    @classmethod
    def initial(cls) -> "ReactorState":
        return cls(1.0, 0.0, 323.0, 323.0)


@dataclass(frozen=True)
class NoiseConfig:
    """Variances of the four noise sources and the master seed.

    ``var_v`` within-batch disturbance, ``var_w`` batch-to-batch drift of the
    repetitive disturbance, ``var_m`` temperature measurement noise and
    ``var_n`` terminal quality noise.
    """

    var_v: float = 0.3
    var_w: float = 0.4
    var_m: float = 0.06
    var_n: float = 0.005
    seed: int = 0

    def validate(self):
        for name in ("var_v", "var_w", "var_m", "var_n"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise DomainError(f"{name} must be a finite variance >= 0, got {value}")

    @classmethod
    def silent(cls, seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class BatchTimeGrid:
    T_f: float = 3600.0
    n_steps: int = 40
    dt_sub: float = 1.0

    @property
    def dt(self) -> float:
        return self.T_f / self.n_steps

    @property
    def n_sub(self) -> int:
        return int(round(self.dt / self.dt_sub))

    def validate(self):
        if self.T_f <= 0 or self.n_steps < 1 or self.dt_sub <= 0:
            raise DomainError("T_f, n_steps and dt_sub must be positive")
        if abs(self.n_sub * self.dt_sub - self.dt) > 1e-9 * self.dt:
            raise DomainError(f"dt_sub={self.dt_sub} does not divide the sampling interval {self.dt}")

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


class _Coefficients(NamedTuple):
    a1: float
    a2: float
    e1: float
    e2: float
    heat1: float
    heat2: float
    ua: float
    inv_cap_r: float
    inv_cap_j: float
    inv_vj: float


def _coefficients(p: ReactorParams) -> _Coefficients:
    return _Coefficients(
        a1=p.alpha1 / p.kinetic_time_scale,
        a2=p.alpha2 / p.kinetic_time_scale,
        e1=p.E1 / p.R,
        e2=p.E2 / p.R,
        heat1=-p.lambda1 / (p.rho * p.C_p),
        heat2=-p.lambda2 / (p.rho * p.C_p),
        # h_ow is per minute
        ua=p.h_ow / 60.0 * p.A_o,
        inv_cap_r=1.0 / (p.V * p.rho * p.C_p),
        inv_cap_j=1.0 / (p.C_J * p.V_J * p.rho_J),
        inv_vj=1.0 / p.V_J,
    )


def _rhs(ca, cb, T, tj, F, tj0, c: _Coefficients, exp):
    # works elementwise on floats (exp=math.exp) or arrays (exp=np.exp)
    r1 = c.a1 * exp(-c.e1 / T) * ca * ca
    r2 = c.a2 * exp(-c.e2 / T) * cb
    q = c.ua * (T - tj)
    return (
        -r1,
        r1 - r2,
        c.heat1 * r1 - c.heat2 * r2 - q * c.inv_cap_r,
        F * c.inv_vj * (tj0 - tj) + q * c.inv_cap_j,
    )


def _rk4(x, F, tj0, h, n, c, exp):
    ca, cb, T, tj = x
    h2 = 0.5 * h
    h6 = h / 6.0
    for _ in range(n):
        k1 = _rhs(ca, cb, T, tj, F, tj0, c, exp)
        k2 = _rhs(ca + h2 * k1[0], cb + h2 * k1[1], T + h2 * k1[2], tj + h2 * k1[3], F, tj0, c, exp)
        k3 = _rhs(ca + h2 * k2[0], cb + h2 * k2[1], T + h2 * k2[2], tj + h2 * k2[3], F, tj0, c, exp)
        k4 = _rhs(ca + h * k3[0], cb + h * k3[1], T + h * k3[2], tj + h * k3[3], F, tj0, c, exp)
        ca = ca + h6 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        cb = cb + h6 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        T = T + h6 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        tj = tj + h6 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
    return ca, cb, T, tj


def arrhenius_rates(T, params: ReactorParams = ReactorParams()):
    """Rate constants ``k1 = alpha1 exp(-E1/RT)`` and ``k2 = alpha2 exp(-E2/RT)``.

    Returned in the tabulated units of ``alpha1`` and ``alpha2``.
    """
    T = float(T)
    if not math.isfinite(T) or T <= 0:
        raise DomainError(f"temperature must be finite and positive, got {T}")
    k1 = params.alpha1 * math.exp(-params.E1 / (params.R * T))
    k2 = params.alpha2 * math.exp(-params.E2 / (params.R * T))
    return k1, k2


def state_derivative(s, F_ow: float, T_j0: float, params: ReactorParams = ReactorParams()) -> np.ndarray:
    """Time derivative ``(dC_A, dC_B, dT, dT_J)`` per second."""
    x = s.as_array() if isinstance(s, ReactorState) else np.asarray(s, dtype=float)
    if F_ow < 0:
        raise ConstraintError(f"F_ow must be >= 0, got {F_ow}")
    if not np.all(np.isfinite(x)) or x[2] <= 0:
        raise DomainError(f"invalid reactor state {x}")
    d = _rhs(float(x[0]), float(x[1]), float(x[2]), float(x[3]), float(F_ow), float(T_j0),
             _coefficients(params), math.exp)
    return np.array(d)


def _finish_interval(x, where: str) -> np.ndarray:
    x = np.array(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"integration diverged {where}: {x}")
    if x[0] < 0 or x[1] < 0:
        log.warning("clamping negative concentration %s %s", x[:2], where)
        x[:2] = np.maximum(x[:2], 0.0)
    return x


def integrate_step(s, F_ow: float, T_j0: float, grid: BatchTimeGrid = BatchTimeGrid(),
                   params: ReactorParams = ReactorParams()) -> ReactorState:
    """Advance one sampling interval with classical RK4 and a zero-order-hold input."""
    x = s.as_array() if isinstance(s, ReactorState) else np.asarray(s, dtype=float)
    out = _rk4(tuple(float(v) for v in x), float(F_ow), float(T_j0), grid.dt_sub, grid.n_sub,
               _coefficients(params), math.exp)
    return ReactorState.from_array(_finish_interval(out, "in integrate_step"))


def integrate_interval_batch(X: np.ndarray, F, T_j0, grid: BatchTimeGrid = BatchTimeGrid(),
                             params: ReactorParams = ReactorParams()) -> np.ndarray:
    """Vectorised :func:`integrate_step` over the rows of ``X`` (shape ``(m, 4)``)."""
    X = np.asarray(X, dtype=float)
    m = X.shape[0]
    F = np.broadcast_to(np.asarray(F, dtype=float), (m,))
    tj0 = np.broadcast_to(np.asarray(T_j0, dtype=float), (m,))
    out = _rk4(tuple(X[:, i] for i in range(N_X)), F, tj0, grid.dt_sub, grid.n_sub,
               _coefficients(params), np.exp)
    out = np.stack(out, axis=1)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("integration diverged in integrate_interval_batch")
    return out


def simulate_batch_many(U: np.ndarray, grid: BatchTimeGrid = BatchTimeGrid(),
                        params: ReactorParams = ReactorParams(), T_j0=None, x0=None) -> np.ndarray:
    """Noise-free simulation of several input trajectories at once.

    ``U`` has shape ``(m, n_steps)``; returns states of shape ``(m, n_steps + 1, 4)``.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    m = U.shape[0]
    tj0 = params.T_j0_nominal if T_j0 is None else T_j0
    x = np.tile(ReactorState.initial().as_array() if x0 is None else np.asarray(x0, float), (m, 1))
    out = np.empty((m, grid.n_steps + 1, N_X))
    out[:, 0] = x
    if m == 1 and np.ndim(tj0) == 0:
        # scalar arithmetic is several times faster than size-1 arrays
        c = _coefficients(params)
        xs = tuple(float(v) for v in x[0])
        for t in range(grid.n_steps):
            xs = _rk4(xs, float(U[0, t]), float(tj0), grid.dt_sub, grid.n_sub, c, math.exp)
            out[0, t + 1] = xs
        if not np.all(np.isfinite(out)):
            raise IntegrationError("integration diverged in simulate_batch_many")
        return out
    for t in range(grid.n_steps):
        x = integrate_interval_batch(x, U[:, t], tj0, grid, params)
        out[:, t + 1] = x
    return out


def drift_increments(noise: NoiseConfig, n_batches: int, n_steps: int) -> np.ndarray:
    """Batch-to-batch drift vectors ``w_1 .. w_n`` as rows of an array."""
    rng = np.random.default_rng([noise.seed, _STREAM_DRIFT])
    return math.sqrt(noise.var_w) * rng.standard_normal((n_batches, n_steps))


def repetitive_disturbance(noise: NoiseConfig, batch_index: int, n_steps: int, offset: float) -> np.ndarray:
    """Repetitive disturbance of batch ``k``: ``offset + w_1 + ... + w_{k-1}``."""
    if batch_index < 1:
        raise DomainError("batch_index starts at 1")
    w = drift_increments(noise, batch_index - 1, n_steps)
    return offset + w.sum(axis=0)


def within_batch_disturbance(noise: NoiseConfig, batch_index: int, n_steps: int) -> np.ndarray:
    rng = np.random.default_rng([noise.seed, _STREAM_WITHIN, batch_index])
    return math.sqrt(noise.var_v) * rng.standard_normal(n_steps)


def _measurement_noise(noise: NoiseConfig, batch_index: int, n_steps: int):
    rng = np.random.default_rng([noise.seed, _STREAM_MEAS, batch_index])
    m = math.sqrt(noise.var_m) * rng.standard_normal((n_steps, N_Z))
    n = math.sqrt(noise.var_n) * rng.standard_normal(N_Y)
    return m, n


def _check_input(F: float):
    if not (U_MIN <= F <= U_MAX):
        raise ConstraintError(f"F_ow={F} outside [{U_MIN}, {U_MAX}] L/s")


@dataclass
class BatchResult:
    states: np.ndarray  # (n_steps + 1, 4)
    u: np.ndarray       # (n_steps,)
    d: np.ndarray       # (n_steps,) inlet-temperature disturbance
    z: np.ndarray       # (n_steps, 2) noisy (T, T_J) at t = 1..n_steps
    y_T: np.ndarray     # (2,) noisy terminal (C_A, C_B)


@dataclass
class PlantBatch:
    """One batch of the actual process, driven one sampling interval at a time.

    The disturbance and noise realisations are fixed at construction from
    ``(noise.seed, batch_index)``, so the batch is reproducible regardless of
    what other batches were simulated before.
    """

    noise: NoiseConfig
    batch_index: int
    params: ReactorParams = field(default_factory=ReactorParams)
    grid: BatchTimeGrid = field(default_factory=BatchTimeGrid)
    x0: np.ndarray | None = None

    def __post_init__(self):
        n = self.grid.n_steps
        self.d_bar = repetitive_disturbance(self.noise, self.batch_index, n, self.params.offset)
        self.v = within_batch_disturbance(self.noise, self.batch_index, n)
        self.d = self.d_bar + self.v
        self._m, self._n = _measurement_noise(self.noise, self.batch_index, n)
        self._coef = _coefficients(self.params)
        x0 = ReactorState.initial().as_array() if self.x0 is None else np.asarray(self.x0, float)
        self.states = [x0]
        self.u: list[float] = []
        self.z: list[np.ndarray] = []

    @property
    def t(self) -> int:
        return len(self.u)

    @property
    def done(self) -> bool:
        return self.t >= self.grid.n_steps

    def step(self, F_ow: float) -> np.ndarray:
        """Apply ``F_ow`` over the next interval and return the noisy ``(T, T_J)``."""
        if self.done:
            raise IndexError("batch already finished")
        F_ow = float(F_ow)
        _check_input(F_ow)
        t = self.t
        tj0 = self.params.T_j0_nominal + self.d[t]
        out = _rk4(tuple(float(v) for v in self.states[-1]), F_ow, tj0, self.grid.dt_sub,
                   self.grid.n_sub, self._coef, math.exp)
        x = _finish_interval(out, f"at step {t} of batch {self.batch_index}")
        self.states.append(x)
        self.u.append(F_ow)
        z = x[list(OBS_INDEX)] + self._m[t]
        self.z.append(z)
        return z

    def terminal_quality(self) -> np.ndarray:
        if not self.done:
            raise IndexError("terminal quality is only available at the end of the batch")
        return self.states[-1][list(QUALITY_INDEX)] + self._n

    def result(self) -> BatchResult:
        return BatchResult(np.array(self.states), np.array(self.u), self.d.copy(),
                           np.array(self.z), self.terminal_quality())


def run_batch(u, noise: NoiseConfig, batch_index: int = 1, params: ReactorParams = ReactorParams(),
              grid: BatchTimeGrid = BatchTimeGrid(), x0=None) -> BatchResult:
    """Simulate a whole batch of the actual process under the input trajectory ``u``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != grid.n_steps:
        raise DomainError(f"expected {grid.n_steps} inputs, got {u.size}")
    for F in u:
        _check_input(F)
    plant = PlantBatch(noise, batch_index, params, grid, x0)
    for F in u:
        plant.step(F)
    return plant.result()


def nominal_run(u, params: ReactorParams = ReactorParams(), grid: BatchTimeGrid = BatchTimeGrid()) -> np.ndarray:
    """Disturbance-free states under the nominal inlet temperature."""
    nominal = replace(params, T_j0_actual=params.T_j0_nominal)
    return run_batch(u, NoiseConfig.silent(), 1, nominal, grid).states


TRAJECTORY_COLUMNS = ("step", "time_s", "C_A", "C_B", "T", "T_J", "F_ow", "d")


def write_trajectory_csv(path, states, u, d=None, grid: BatchTimeGrid = BatchTimeGrid()):
    """Write one row per sampling instant.

    The final row carries the input and disturbance held over the last interval.
    """
    states = np.asarray(states, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    d = np.zeros_like(u) if d is None else np.asarray(d, dtype=float).reshape(-1)
    times = grid.times()
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for t in range(states.shape[0]):
            j = min(t, u.size - 1)
            w.writerow([t, repr(float(times[t]))] + [repr(float(v)) for v in states[t]]
                       + [repr(float(u[j])), repr(float(d[j]))])


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`; returns ``(states, u, d)``."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    states = np.array([[float(r[c]) for c in STATE_NAMES] for r in rows])
    u = np.array([float(r["F_ow"]) for r in rows[:-1]])
    d = np.array([float(r["d"]) for r in rows[:-1]])
    return states, u, d
