"""Kalman-filter-based iterative learning control in two layers.

Outer loop (batch to batch): the lifted deviation state of the whole batch is
propagated with the incremental model ``x_k = x_{k-1} + Psi_u du_k + noise`` and
corrected once per batch with every temperature measurement plus the terminal
quality. The next input trajectory minimises the economic objective predicted
from the posterior.

Inner loop (within batch): the same lifted state is propagated one input at a
time, ``x_h(t+1) = x_h(t) + Psi_u(t) du(t) + noise``, corrected with the newest
temperature measurement only, and the remaining inputs are re-optimised at every
step; only the first of them is applied.

The within-batch predict/correct recursion is built by analogy with the
batch-to-batch one, restricted to one time block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .errors import DomainError, EstimationError, OptimizerError
from .lifted_model import LiftedBatchModel
from .qp import projected_gradient
from .reactor_sim import OBS_INDEX, QUALITY_INDEX, U_MAX, U_MIN

COND_LIMIT = 1e12


@dataclass(frozen=True)
class NoiseCovariances:
    R_w: np.ndarray
    R_v: np.ndarray
    R_m: np.ndarray
    R_n: np.ndarray

    @classmethod
    def from_variances(cls, var_w=0.4, var_v=0.3, var_m=0.06, var_n=0.005, n_d=1, n_z=2, n_y=2):
        return cls(var_w * np.eye(n_d), var_v * np.eye(n_d), var_m * np.eye(n_z), var_n * np.eye(n_y))

    @classmethod
    def from_noise(cls, noise, n_d=1, n_z=2, n_y=2):
        return cls.from_variances(noise.var_w, noise.var_v, noise.var_m, noise.var_n, n_d, n_z, n_y)

    def validate(self):
        for name in ("R_w", "R_v", "R_m", "R_n"):
            M = np.atleast_2d(getattr(self, name))
            if not np.allclose(M, M.T, atol=1e-12):
                raise DomainError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise DomainError(f"{name} is not positive semidefinite")

    @property
    def Q_step(self) -> np.ndarray:
        """Per-instant covariance of ``w_{k-1} + v_k - v_{k-1}``."""
        return np.atleast_2d(self.R_w) + 2.0 * np.atleast_2d(self.R_v)


@dataclass
class BatchKalmanState:
    x_hat: np.ndarray
    P: np.ndarray
    u_applied: np.ndarray

    def check(self, sym_tol=1e-10, psd_tol=1e-9):
        if np.abs(self.P - self.P.T).max() > sym_tol:
            raise EstimationError("covariance lost symmetry")
        if np.linalg.eigvalsh(self.P).min() < -psd_tol:
            raise EstimationError("covariance lost positive semidefiniteness")


@dataclass(frozen=True)
class IlcObjective:
    """Economic objective inherited from the nominal optimisation, in deviation form.

    ``C_B_nom_final`` is the nominal terminal product concentration; ``cb_row``
    picks the product concentration out of the terminal quality vector.
    """

    C_B_nom_final: float
    C_B_sp: float = 0.58
    k_cost: float = 0.05
    V: float = 1200.0
    u_bounds: tuple[float, float] = (U_MIN, U_MAX)
    cb_row: int = 1
    tol: float = 1e-8
    max_iters: int = 5000


@dataclass
class IlcSolution:
    delta_u: np.ndarray
    u_next: np.ndarray
    predicted_x: np.ndarray
    predicted_J: float
    iterations: int = 0
    grad_norm: float = 0.0


# ---------------------------------------------------------------- filtering


def _sym(P):
    return 0.5 * (P + P.T)


def kalman_update(x_pred, P_pred, L, e, R, labels=None):
    """Measurement correction with innovation ``e`` (already ``meas - L x_pred``).

    Returns ``(x_post, P_post, K, S)``.
    """
    S = _sym(L @ P_pred @ L.T + R)
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        where = ""
        if labels is not None:
            where = f" (weakest block: {labels[int(np.argmin(np.diag(S)))]})"
        raise EstimationError(f"innovation covariance is singular, condition number {cond:.3e}{where}")
    PLt = P_pred @ L.T
    K = np.linalg.solve(S, PLt.T).T
    x = x_pred + K @ e
    P = _sym(P_pred - K @ PLt.T)
    return x, P, K, S


def process_noise_lifted(model: LiftedBatchModel, cov: NoiseCovariances) -> np.ndarray:
    """``Psi_d blockdiag(R_w + 2 R_v) Psi_d^T``."""
    Q = np.kron(np.eye(model.T), cov.Q_step)
    return model.Psi_d @ Q @ model.Psi_d.T


def b2b_predict(prev: BatchKalmanState, delta_u, model: LiftedBatchModel, cov: NoiseCovariances,
                Q_lifted=None):
    """Prior of the next batch from the previous posterior and the input increment."""
    delta_u = np.asarray(delta_u, dtype=float).reshape(-1)
    x_pred = prev.x_hat + model.Psi_u @ delta_u
    Q = process_noise_lifted(model, cov) if Q_lifted is None else Q_lifted
    return x_pred, _sym(prev.P + Q)


def _measurement_labels(model, times, with_quality):
    labels = [f"z(t={t})[{i}]" for t in times for i in range(model.n_z)]
    if with_quality:
        labels += [f"y(T)[{i}]" for i in range(model.n_y)]
    return labels


def b2b_update(pred, z, y_T, model: LiftedBatchModel, cov: NoiseCovariances, u_applied=None) -> BatchKalmanState:
    """Correct the batch prior with all observations ``z`` (stacked) and the terminal quality.

    Measurements are deviations from the nominal trajectory.
    """
    x_pred, P_pred = pred
    z = np.asarray(z, dtype=float).reshape(-1)
    y_T = np.asarray(y_T, dtype=float).reshape(-1)
    L = np.vstack([model.Omega, model.Gamma])
    R = block_diag(np.kron(np.eye(model.T), cov.R_m), cov.R_n)
    e = np.concatenate([z, y_T]) - L @ x_pred
    labels = _measurement_labels(model, range(1, model.T + 1), True)
    x, P, _, _ = kalman_update(x_pred, P_pred, L, e, R, labels)
    u = np.zeros(model.T * model.n_u) if u_applied is None else np.asarray(u_applied, dtype=float).reshape(-1)
    return BatchKalmanState(x, P, u.copy())


def wb_predict(state, delta_u_t, model: LiftedBatchModel, cov: NoiseCovariances, t: int):
    """Propagate the lifted estimate over the input applied at time ``t``."""
    if not 0 <= t < model.T:
        raise DomainError(f"t={t} outside 0..{model.T - 1}")
    x_hat, P = state
    du = np.asarray(delta_u_t, dtype=float).reshape(-1)
    x_pred = x_hat + model.psi_u_col(t) @ du
    G = model.psi_d_col(t)
    return x_pred, _sym(P + G @ cov.Q_step @ G.T)


def wb_update(pred, z_t, t: int, model: LiftedBatchModel, cov: NoiseCovariances, y_T=None):
    """Correct with the observation ``z(t)`` (``t`` in ``1..T``), plus ``y(T)`` at ``t = T`` if given.

    Returns ``(x_post, P_post)``.
    """
    if not 1 <= t <= model.T:
        raise DomainError(f"t={t} outside 1..{model.T}")
    x_pred, P_pred = pred
    L = model.omega_row(t)
    meas = np.asarray(z_t, dtype=float).reshape(-1)
    R = np.atleast_2d(cov.R_m)
    with_quality = y_T is not None and t == model.T
    if with_quality:
        L = np.vstack([L, model.Gamma])
        meas = np.concatenate([meas, np.asarray(y_T, dtype=float).reshape(-1)])
        R = block_diag(R, cov.R_n)
    e = meas - L @ x_pred
    x, P, _, _ = kalman_update(x_pred, P_pred, L, e, R, _measurement_labels(model, [t], with_quality))
    return x, P


# ------------------------------------------------------------------ control


def _solve_tail(x_hat, u_prev, model: LiftedBatchModel, obj: IlcObjective, t: int, warm=None):
    """Minimise the economic objective over the increments ``du(t..T-1)``."""
    n_u = model.n_u
    cols = slice(t * n_u, model.T * n_u)
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    u0 = u_prev[cols]
    g = model.Gamma[obj.cb_row] @ model.Psi_u[:, cols]
    c = obj.C_B_nom_final + model.Gamma[obj.cb_row] @ x_hat - obj.C_B_sp
    elapsed = obj.k_cost * float(u_prev[:t * n_u] @ u_prev[:t * n_u])

    def fun(du):
        r = c + g @ du
        w = u0 + du
        return obj.V * r * r + obj.k_cost * float(w @ w) + elapsed

    def grad(du):
        return 2.0 * obj.V * (c + g @ du) * g + 2.0 * obj.k_cost * (u0 + du)

    def hessp(_, d):
        return 2.0 * obj.V * (g @ d) * g + 2.0 * obj.k_cost * d

    lo, hi = obj.u_bounds
    start = np.zeros_like(u0) if warm is None else np.asarray(warm, dtype=float)
    res = projected_gradient(fun, grad, start, lo - u0, hi - u0, tol=obj.tol,
                             max_iters=obj.max_iters, step0=1.0 / (2.0 * obj.k_cost + 2.0 * obj.V * g @ g),
                             hessp=hessp)
    if not res.converged:
        raise OptimizerError(
            f"ILC QP at t={t} did not converge ({res.reason}), projected gradient norm {res.grad_norm:.3e}",
            iterate=res.x, grad_norm=res.grad_norm)
    return res


def ilc_objective_value(x_hat, u, model: LiftedBatchModel, obj: IlcObjective) -> float:
    """Economic cost predicted for the lifted deviation ``x_hat`` under absolute input ``u``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    cb = obj.C_B_nom_final + model.Gamma[obj.cb_row] @ x_hat
    return float(obj.V * (cb - obj.C_B_sp) ** 2 + obj.k_cost * u @ u)


def b2b_ilc_solve(state: BatchKalmanState, model: LiftedBatchModel, obj: IlcObjective) -> IlcSolution:
    """Next-batch input trajectory from the current posterior."""
    res = _solve_tail(state.x_hat, state.u_applied, model, obj, 0)
    du = res.x
    u_next = np.clip(state.u_applied + du, *obj.u_bounds)
    x_next = state.x_hat + model.Psi_u @ du
    return IlcSolution(du, u_next, x_next, res.fun, res.n_iter, res.grad_norm)


def wb_ilc_solve(state, u_h_t, model: LiftedBatchModel, obj: IlcObjective, t: int, warm=None):
    """Re-optimise the remaining increments at time ``t``.

    ``state`` is ``(x_hat, P)`` or a :class:`BatchKalmanState`; ``u_h_t`` is the
    full-length input trajectory with the increments of ``0..t-1`` already
    folded in. Returns ``(delta_u_future, applied)`` where ``applied`` is the
    increment for time ``t`` only.
    """
    if not 0 <= t < model.T:
        raise DomainError(f"t={t} outside 0..{model.T - 1}")
    x_hat = state.x_hat if isinstance(state, BatchKalmanState) else state[0]
    res = _solve_tail(x_hat, u_h_t, model, obj, t, warm)
    return res.x, res.x[:model.n_u].copy()


@dataclass
class WithinBatchState:
    x_hat: np.ndarray
    P: np.ndarray
    u_h: np.ndarray
    t: int = 0


def hierarchical_init(posterior: BatchKalmanState) -> WithinBatchState:
    """Inner-loop start: previous batch posterior, covariance and input."""
    return WithinBatchState(posterior.x_hat.copy(), posterior.P.copy(), posterior.u_applied.copy(), 0)


def initial_posterior(model: LiftedBatchModel, p0: float = 1.0, u0=None) -> BatchKalmanState:
    """Prior for the first batch: nominal deviation zero, covariance ``p0 I``."""
    n = model.n_x * model.T
    u = model.nominal_u if u0 is None else u0
    return BatchKalmanState(np.zeros(n), p0 * np.eye(n), np.array(u, dtype=float).reshape(-1))


@dataclass
class BatchDiagnostics:
    trace_P: float
    innovation_norm: float
    ilc_objective: float
    u_applied: list[float]

    def to_dict(self):
        return {"trace_P": self.trace_P, "innovation_norm": self.innovation_norm,
                "ilc_objective": self.ilc_objective, "u_applied": list(self.u_applied)}


@dataclass
class HierarchicalIlc:
    """Stateful two-layer informer driving one batch after another.

    Per batch: :meth:`start_batch`, then for ``t = 0..T-1`` :meth:`compute_action`
    followed by :meth:`observe` with the input actually applied and the new
    measurement, then :meth:`finish_batch` with the terminal quality.
    Measurements are absolute; nominal values are subtracted here.
    """

    model: LiftedBatchModel
    cov: NoiseCovariances
    objective: IlcObjective
    p0: float = 1.0
    posterior: BatchKalmanState | None = None
    batch: int = 0
    inner: WithinBatchState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.posterior is None:
            self.posterior = initial_posterior(self.model, self.p0)
        self._Q = process_noise_lifted(self.model, self.cov)
        self._warm = None
        self._last_solution = None
        self._z: list[np.ndarray] = []
        self.last_objective = float("nan")

    def start_batch(self):
        self.batch += 1
        self.inner = hierarchical_init(self.posterior)
        self._warm = None
        self._z = []

    @property
    def t(self) -> int:
        return self.inner.t

    def compute_action(self) -> float:
        """Absolute input proposed for the current instant."""
        inner = self.inner
        t = inner.t
        res = _solve_tail(inner.x_hat, inner.u_h, self.model, self.objective, t, self._warm)
        self._last_solution = res.x
        self.last_objective = res.fun
        u = inner.u_h[t] + float(res.x[0])
        return float(np.clip(u, *self.objective.u_bounds))

    def observe(self, u_applied: float, z_next, y_T=None) -> np.ndarray:
        """Fold in the applied input and the measurement at ``t + 1``; returns the state estimate."""
        inner = self.inner
        t = inner.t
        du = float(u_applied) - inner.u_h[t]
        x_pred, P_pred = wb_predict((inner.x_hat, inner.P), [du], self.model, self.cov, t)
        z_dev = np.asarray(z_next, dtype=float) - self.model.nominal_x[t + 1][list(OBS_INDEX)]
        y_dev = None
        if y_T is not None:
            y_dev = np.asarray(y_T, dtype=float) - self.model.nominal_x[-1][list(QUALITY_INDEX)]
        inner.x_hat, inner.P = wb_update((x_pred, P_pred), z_dev, t + 1, self.model, self.cov, y_dev)
        inner.u_h = inner.u_h.copy()
        inner.u_h[t] = float(u_applied)
        inner.t = t + 1
        self._z.append(z_dev)
        if self._last_solution is not None and self._last_solution.size > 1:
            self._warm = self._last_solution[1:]
        else:
            self._warm = None
        return self.state_estimate()

    def state_estimate(self) -> np.ndarray:
        """Absolute estimate of ``x(t)`` at the current instant of the batch."""
        t = self.inner.t
        if t == 0:
            return self.model.nominal_x[0].copy()
        return self.model.nominal_x[t] + self.model.state_block(self.inner.x_hat, t)

    def finish_batch(self, y_T) -> BatchDiagnostics:
        """Batch-to-batch correction with every measurement of the batch just ended."""
        inner = self.inner
        if inner.t != self.model.T:
            raise DomainError("finish_batch called before the batch ended")
        u_k = inner.u_h.copy()
        du = u_k - self.posterior.u_applied
        pred = b2b_predict(self.posterior, du, self.model, self.cov, self._Q)
        z = np.concatenate(self._z)
        y_dev = np.asarray(y_T, dtype=float) - self.model.nominal_x[-1][list(QUALITY_INDEX)]
        L = np.vstack([self.model.Omega, self.model.Gamma])
        innovation = np.concatenate([z, y_dev]) - L @ pred[0]
        self.posterior = b2b_update(pred, z, y_dev, self.model, self.cov, u_k)
        obj = ilc_objective_value(self.posterior.x_hat, u_k, self.model, self.objective)
        return BatchDiagnostics(float(np.trace(self.posterior.P)), float(np.linalg.norm(innovation)),
                                obj, u_k.tolist())
