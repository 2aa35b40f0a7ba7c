"""Economic optimisation of the nominal batch trajectory.

Single shooting with piecewise-constant flows over the sampling intervals; the
gradient is obtained by central finite differences over all inputs in one
vectorised simulation and the box ``[u_min, u_max]`` is handled by projection.
The reactor-temperature bounds enter as a quadratic penalty.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, OptimizerError
from .qp import project_box, projected_gradient
from .reactor_sim import (
    BatchTimeGrid,
    ReactorParams,
    U_MAX,
    U_MIN,
    read_trajectory_csv,
    simulate_batch_many,
    write_trajectory_csv,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RtoConfig:
    C_B_sp: float = 0.58
    k_cost: float = 0.05
    u_bounds: tuple[float, float] = (U_MIN, U_MAX)
    T_bounds: tuple[float, float] = (298.0, 378.0)
    u_init: float = 2.0
    max_iters: int = 300
    step_size: float = 1.0
    fd_step: float = 1e-5
    temp_penalty_weight: float = 1e3
    grad_tol: float = 1e-6
    stall_tol: float = 1e-8
    stall_iters: int = 10

    def validate(self):
        lo, hi = self.u_bounds
        if not (U_MIN <= lo < hi <= U_MAX):
            raise DomainError(f"u_bounds must satisfy {U_MIN} <= lo < hi <= {U_MAX}")
        if not self.T_bounds[0] < self.T_bounds[1]:
            raise DomainError("T_bounds must be ordered")
        if self.temp_penalty_weight < 0:
            raise DomainError("temp_penalty_weight must be >= 0")
        if not lo <= self.u_init <= hi:
            raise DomainError("u_init must lie inside u_bounds")
        if self.max_iters < 1 or self.fd_step <= 0 or self.step_size <= 0:
            raise DomainError("max_iters, fd_step and step_size must be positive")


@dataclass
class NominalTrajectory:
    x_nom: np.ndarray  # (n_steps + 1, 4)
    u_nom: np.ndarray  # (n_steps,)
    J: float
    iterations: int = 0
    converged: bool = False
    reason: str = ""
    grad_norm: float = float("nan")
    history: list[float] = field(default_factory=list)
    temperature_ok: bool = True

    @property
    def T_nom(self) -> np.ndarray:
        return self.x_nom[:, 2]

    @property
    def C_B_final(self) -> float:
        return float(self.x_nom[-1, 1])


def _objective_from_states(states, U, cfg: RtoConfig, params: ReactorParams) -> np.ndarray:
    """Objective for each row of ``U`` given its simulated ``states``."""
    cb = states[:, -1, 1]
    T = states[:, :, 2]
    lo, hi = cfg.T_bounds
    penalty = (np.maximum(0.0, T - hi) ** 2 + np.maximum(0.0, lo - T) ** 2).sum(axis=1)
    return ((cb - cfg.C_B_sp) ** 2 * params.V + cfg.k_cost * (U ** 2).sum(axis=1)
            + cfg.temp_penalty_weight * penalty)


def rto_objective(u, cfg: RtoConfig = RtoConfig(), params: ReactorParams = ReactorParams(),
                  grid: BatchTimeGrid = BatchTimeGrid()) -> float:
    """Terminal-quality cost plus quadratic cooling-water cost of one input trajectory."""
    U = np.asarray(u, dtype=float).reshape(1, -1)
    states = simulate_batch_many(U, grid, params)
    J = float(_objective_from_states(states, U, cfg, params)[0])
    if not np.isfinite(J):
        raise OptimizerError("non-finite RTO objective", iterate=U[0])
    return J


def _fd_gradient(u, cfg, params, grid) -> np.ndarray:
    n = u.size
    h = cfg.fd_step
    U = np.vstack([u + h * np.eye(n), u - h * np.eye(n)])
    states = simulate_batch_many(U, grid, params)
    J = _objective_from_states(states, U, cfg, params)
    return (J[:n] - J[n:]) / (2.0 * h)


def optimize_nominal(cfg: RtoConfig = RtoConfig(), params: ReactorParams = ReactorParams(),
                     grid: BatchTimeGrid = BatchTimeGrid(), u_init=None) -> NominalTrajectory:
    """Projected-gradient solution of the economic problem.

    Terminates on a small projected gradient, on a stall of the objective over
    ``cfg.stall_iters`` iterations, or at ``cfg.max_iters``; the reason is kept
    in the returned trajectory.
    """
    lo, hi = cfg.u_bounds
    u0 = np.full(grid.n_steps, cfg.u_init) if u_init is None else np.asarray(u_init, dtype=float)
    u0 = project_box(u0, lo, hi)

    res = projected_gradient(
        lambda u: rto_objective(u, cfg, params, grid),
        lambda u: _fd_gradient(u, cfg, params, grid),
        u0, lo, hi,
        tol=cfg.grad_tol,
        max_iters=cfg.max_iters,
        step0=cfg.step_size,
        stall_tol=cfg.stall_tol,
        stall_iters=cfg.stall_iters,
    )
    u_nom = project_box(res.x, lo, hi)
    x_nom = simulate_batch_many(u_nom[None, :], grid, params)[0]
    T = x_nom[:, 2]
    temperature_ok = bool(np.all((T >= cfg.T_bounds[0]) & (T <= cfg.T_bounds[1])))
    if not temperature_ok:
        log.warning("nominal temperature leaves [%s, %s]", *cfg.T_bounds)
    log.info("RTO finished: J=%.6g after %d iterations (%s)", res.fun, res.n_iter, res.reason)
    return NominalTrajectory(x_nom, u_nom, res.fun, res.n_iter, res.converged, res.reason,
                             res.grad_norm, res.history, temperature_ok)


def save_nominal(nom: NominalTrajectory, out_dir, cfg: RtoConfig = RtoConfig(),
                 grid: BatchTimeGrid = BatchTimeGrid()) -> list[Path]:
    """Write ``nominal.csv`` and ``nominal.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "nominal.csv"
    write_trajectory_csv(csv_path, nom.x_nom, nom.u_nom, None, grid)
    doc = {
        "J": nom.J,
        "iterations": nom.iterations,
        "converged": nom.converged,
        "reason": nom.reason,
        "grad_norm": nom.grad_norm,
        "temperature_ok": nom.temperature_ok,
        "C_B_final": nom.C_B_final,
        "u_nom": nom.u_nom.tolist(),
        "config": asdict(cfg),
    }
    json_path = out_dir / "nominal.json"
    json_path.write_text(json.dumps(doc, indent=2))
    return [csv_path, json_path]


def load_nominal(out_dir) -> NominalTrajectory:
    out_dir = Path(out_dir)
    states, _, _ = read_trajectory_csv(out_dir / "nominal.csv")
    doc = json.loads((out_dir / "nominal.json").read_text())
    return NominalTrajectory(states, np.array(doc["u_nom"]), doc["J"], doc["iterations"],
                             doc["converged"], doc["reason"], doc["grad_norm"], [],
                             doc["temperature_ok"])
