"""Linear time-varying model along the nominal trajectory and its lifted form.

The one-step RK4 map of the reactor is linearised at every sampling instant,

    x(t+1) = A(t) x(t) + B_u(t) u(t) + B_d(t) d(t),
    z(t)   = F(t) x(t),       y(T) = C_T x(T),

in deviation variables around ``(nominal_x, nominal_u)``, and the whole batch
is stacked into a single linear map

    x = Phi x(0) + Psi_u u + Psi_d d,   z = Omega x,   y(T) = Gamma x,

with ``x = [x(1); ...; x(T)]``, ``u = [u(0); ...; u(T-1)]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, LinearizationError
from .reactor_sim import (
    N_D,
    N_U,
    N_X,
    OBS_INDEX,
    QUALITY_INDEX,
    BatchTimeGrid,
    ReactorParams,
    integrate_interval_batch,
)


@dataclass
class LtvMatrices:
    A: np.ndarray      # (T, n_x, n_x)
    B_u: np.ndarray    # (T, n_x, n_u)
    B_d: np.ndarray    # (T, n_x, n_d)
    F_obs: np.ndarray  # (T, n_z, n_x); entry t is the observation matrix of x(t+1)
    C_T: np.ndarray    # (n_y, n_x)

    @property
    def T(self) -> int:
        return self.A.shape[0]

    def check(self):
        T = self.T
        for name in ("B_u", "B_d", "F_obs"):
            if getattr(self, name).shape[0] != T:
                raise DomainError(f"{name} has {getattr(self, name).shape[0]} entries, expected {T}")
        for name in ("A", "B_u", "B_d", "F_obs", "C_T"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise LinearizationError(f"{name} contains non-finite entries")


def selector(rows, n: int) -> np.ndarray:
    S = np.zeros((len(rows), n))
    S[np.arange(len(rows)), list(rows)] = 1.0
    return S


def linearize(nominal_x, nominal_u, grid: BatchTimeGrid = BatchTimeGrid(),
              params: ReactorParams = ReactorParams(), rel_step: float = 1e-6,
              abs_step: float = 1e-8) -> LtvMatrices:
    """Central finite-difference Jacobians of the one-interval map at every instant.

    The disturbance input is the inlet-temperature deviation from
    ``params.T_j0_nominal``, linearised at zero.
    """
    x_nom = np.asarray(nominal_x, dtype=float)
    u_nom = np.asarray(nominal_u, dtype=float).reshape(-1)
    T = grid.n_steps
    if x_nom.shape[0] < T or u_nom.size != T:
        raise DomainError("nominal trajectory does not match the time grid")
    n_var = N_X + N_U + N_D
    base = np.concatenate([x_nom[:T], u_nom[:, None], np.zeros((T, 1))], axis=1)  # (T, n_var)
    h = np.maximum(rel_step * np.abs(base), abs_step)                              # (T, n_var)

    # rows ordered (t, variable, sign)
    pert = np.repeat(base[:, None, None, :], n_var, axis=1).repeat(2, axis=2)
    for i in range(n_var):
        pert[:, i, 0, i] += h[:, i]
        pert[:, i, 1, i] -= h[:, i]
    pert = pert.reshape(-1, n_var)
    out = integrate_interval_batch(pert[:, :N_X], pert[:, N_X], params.T_j0_nominal + pert[:, N_X + 1],
                                   grid, params)
    out = out.reshape(T, n_var, 2, N_X)
    jac = (out[:, :, 0, :] - out[:, :, 1, :]) / (2.0 * h[:, :, None])  # (T, n_var, n_x)
    jac = np.transpose(jac, (0, 2, 1))                                   # (T, n_x, n_var)
    if not np.all(np.isfinite(jac)):
        bad = np.argwhere(~np.isfinite(jac))[0]
        raise LinearizationError(f"non-finite Jacobian entry at t={bad[0]}, row={bad[1]}, column={bad[2]}")

    F = selector(OBS_INDEX, N_X)
    ltv = LtvMatrices(
        A=jac[:, :, :N_X].copy(),
        B_u=jac[:, :, N_X:N_X + N_U].copy(),
        B_d=jac[:, :, N_X + N_U:].copy(),
        F_obs=np.repeat(F[None], T, axis=0),
        C_T=selector(QUALITY_INDEX, N_X),
    )
    ltv.check()
    return ltv


@dataclass
class LiftedBatchModel:
    Phi: np.ndarray
    Psi_u: np.ndarray
    Psi_d: np.ndarray
    Omega: np.ndarray
    Gamma: np.ndarray
    n_x: int
    n_u: int
    n_d: int
    n_z: int
    n_y: int
    T: int
    nominal_x: np.ndarray | None = None
    nominal_u: np.ndarray | None = None

    def psi_u_col(self, t: int) -> np.ndarray:
        """Block column of ``Psi_u`` multiplying ``u(t)``."""
        return self.Psi_u[:, t * self.n_u:(t + 1) * self.n_u]

    def psi_d_col(self, t: int) -> np.ndarray:
        return self.Psi_d[:, t * self.n_d:(t + 1) * self.n_d]

    def omega_row(self, t: int) -> np.ndarray:
        """Rows of ``Omega`` producing ``z(t)``, ``t`` in ``1..T``."""
        if not 1 <= t <= self.T:
            raise DomainError(f"measurement time {t} outside 1..{self.T}")
        return self.Omega[(t - 1) * self.n_z:t * self.n_z]

    def state_block(self, x_lifted, t: int) -> np.ndarray:
        """``x(t)`` out of a lifted vector, ``t`` in ``1..T``."""
        return np.asarray(x_lifted)[(t - 1) * self.n_x:t * self.n_x]

    def lift_states(self, states) -> np.ndarray:
        """Deviation of an absolute ``(T + 1, n_x)`` trajectory, stacked over ``t = 1..T``."""
        states = np.asarray(states, dtype=float)
        return (states[1:] - self.nominal_x[1:]).reshape(-1)

    def unlift_states(self, x_lifted) -> np.ndarray:
        """Absolute ``(T + 1, n_x)`` trajectory from a lifted deviation vector."""
        body = np.asarray(x_lifted).reshape(self.T, self.n_x) + self.nominal_x[1:]
        return np.vstack([self.nominal_x[:1], body])

    def to_json(self) -> str:
        def mat(a):
            a = np.atleast_2d(np.asarray(a, dtype=float))
            return {"rows": a.shape[0], "cols": a.shape[1], "data": a.reshape(-1).tolist()}

        doc = {
            "format": "batchloop.lifted/1",
            "dims": {k: getattr(self, k) for k in ("n_x", "n_u", "n_d", "n_z", "n_y", "T")},
            "Phi": mat(self.Phi),
            "Psi_u": mat(self.Psi_u),
            "Psi_d": mat(self.Psi_d),
            "Omega": mat(self.Omega),
            "Gamma": mat(self.Gamma),
            "nominal_x": None if self.nominal_x is None else mat(self.nominal_x),
            "nominal_u": None if self.nominal_u is None else mat(np.reshape(self.nominal_u, (1, -1))),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "LiftedBatchModel":
        doc = json.loads(text)

        def mat(m):
            if m is None:
                return None
            return np.array(m["data"], dtype=float).reshape(m["rows"], m["cols"])

        nominal_u = mat(doc["nominal_u"])
        return cls(
            Phi=mat(doc["Phi"]), Psi_u=mat(doc["Psi_u"]), Psi_d=mat(doc["Psi_d"]),
            Omega=mat(doc["Omega"]), Gamma=mat(doc["Gamma"]),
            nominal_x=mat(doc["nominal_x"]),
            nominal_u=None if nominal_u is None else nominal_u.reshape(-1),
            **doc["dims"],
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "LiftedBatchModel":
        return cls.from_json(Path(path).read_text())


def _lower_block_toeplitz(A, B) -> np.ndarray:
    T, n_x, _ = A.shape
    m = B.shape[2]
    out = np.zeros((n_x * T, m * T))
    for j in range(T):
        M = B[j]
        out[j * n_x:(j + 1) * n_x, j * m:(j + 1) * m] = M
        for r in range(j + 1, T):
            M = A[r] @ M
            out[r * n_x:(r + 1) * n_x, j * m:(j + 1) * m] = M
    return out


def build_lifted(ltv: LtvMatrices, nominal_x=None, nominal_u=None) -> LiftedBatchModel:
    """Stack an LTV model over the batch.

    Row block ``r`` corresponds to ``x(r+1)``; block ``(r, j)`` of ``Psi_u`` is
    ``A(r) ... A(j+1) B_u(j)`` for ``j <= r`` and zero otherwise. ``Psi_d`` uses
    the same convention.
    """
    ltv.check()
    A = ltv.A
    T, n_x, _ = A.shape
    n_u = ltv.B_u.shape[2]
    n_d = ltv.B_d.shape[2]
    n_z = ltv.F_obs.shape[1]
    n_y = ltv.C_T.shape[0]

    Phi = np.zeros((n_x * T, n_x))
    M = np.eye(n_x)
    for r in range(T):
        M = A[r] @ M
        Phi[r * n_x:(r + 1) * n_x] = M

    Omega = np.zeros((n_z * T, n_x * T))
    for r in range(T):
        Omega[r * n_z:(r + 1) * n_z, r * n_x:(r + 1) * n_x] = ltv.F_obs[r]
    Gamma = np.zeros((n_y, n_x * T))
    Gamma[:, (T - 1) * n_x:] = ltv.C_T

    return LiftedBatchModel(
        Phi=Phi,
        Psi_u=_lower_block_toeplitz(A, ltv.B_u),
        Psi_d=_lower_block_toeplitz(A, ltv.B_d),
        Omega=Omega,
        Gamma=Gamma,
        n_x=n_x, n_u=n_u, n_d=n_d, n_z=n_z, n_y=n_y, T=T,
        nominal_x=None if nominal_x is None else np.asarray(nominal_x, dtype=float),
        nominal_u=None if nominal_u is None else np.asarray(nominal_u, dtype=float).reshape(-1),
    )


def _check_dim(name, v, n):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != n:
        raise DomainError(f"{name} has length {v.size}, expected {n}")
    return v


def predict_batch(model: LiftedBatchModel, x0, u, d) -> np.ndarray:
    """Lifted state ``Phi x0 + Psi_u u + Psi_d d``."""
    x0 = _check_dim("x0", x0, model.n_x)
    u = _check_dim("u", u, model.n_u * model.T)
    d = _check_dim("d", d, model.n_d * model.T)
    return model.Phi @ x0 + model.Psi_u @ u + model.Psi_d @ d


def incremental_predict(model: LiftedBatchModel, x_prev, delta_u) -> np.ndarray:
    """Batch-to-batch prediction ``x_prev + Psi_u delta_u`` (noise-free part)."""
    x_prev = _check_dim("x_prev", x_prev, model.n_x * model.T)
    delta_u = _check_dim("delta_u", delta_u, model.n_u * model.T)
    return x_prev + model.Psi_u @ delta_u


def linearize_nominal(nominal, grid: BatchTimeGrid = BatchTimeGrid(),
                      params: ReactorParams = ReactorParams()) -> LiftedBatchModel:
    """Convenience: linearise around a :class:`~batchloop.rto.NominalTrajectory` and lift."""
    ltv = linearize(nominal.x_nom, nominal.u_nom, grid, params)
    return build_lifted(ltv, nominal.x_nom, nominal.u_nom)
