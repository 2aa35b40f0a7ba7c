"""Control-informed imitation and reinforcement learning around the ILC informer.

Three loops are provided:

* :func:`pretrain_offline` drives a linear surrogate of the process (built
  from the lifted model, never the nonlinear simulator) with the informer's
  input; the agent acts only to be scored against that input.
* :func:`train_online` runs the real process with the fused input
  ``theta u_ILC + (1 - theta) a``; ``theta`` shrinks as the agent agrees with
  the informer and as episodes accumulate.
* :func:`train_baseline_ppo` runs plain PPO on raw noisy measurements.

Every loop returns one :class:`BatchRecord` per episode and can stream the
records to an output directory as they complete.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchLoopError, DomainError
from .kf_ilc import HierarchicalIlc
from .lifted_model import LiftedBatchModel
from .ppo_agent import PpoAgent, Transition
from .reactor_sim import (
    N_Y,
    N_Z,
    OBS_INDEX,
    QUALITY_INDEX,
    U_MAX,
    U_MIN,
    BatchTimeGrid,
    NoiseConfig,
    PlantBatch,
    ReactorParams,
)

log = logging.getLogger(__name__)

DISCRETE_THRESHOLDS = (0.05, 0.1, 0.5, 1.0, 2.0, 3.5, 5.0)
DISCRETE_VALUES = (300.0, 100.0, 50.0, 0.0, -5.0, -20.0, -50.0, -100.0)
CURVE_COLUMNS = ("episode", "reward", "mse", "mean_theta", "mean_gap")
T_INDEX = 2


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 1.0
    thresholds: tuple[float, ...] = DISCRETE_THRESHOLDS
    values: tuple[float, ...] = DISCRETE_VALUES
    ref_variable: str = "T"

    def validate(self):
        if len(self.values) != len(self.thresholds) + 1:
            raise DomainError("discrete reward table needs one more value than thresholds")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])) or self.thresholds[0] <= 0:
            raise DomainError("discrete reward thresholds must be positive and strictly increasing")
        if self.alpha < 0 or self.beta < 0:
            raise DomainError("reward weights must be >= 0")
        if self.ref_variable != "T":
            raise DomainError("only the reactor temperature 'T' is supported as reference variable")


@dataclass(frozen=True)
class FusionConfig:
    K: int = 1000
    rate: float = 1.1
    index_mode: str = "episode"  # or "time"

    def validate(self):
        if self.K < 1 or self.rate <= 0:
            raise DomainError("fusion needs K >= 1 and rate > 0")
        if self.index_mode not in ("episode", "time"):
            raise DomainError(f"unknown index_mode {self.index_mode!r}")


@dataclass(frozen=True)
class TrainingConfig:
    checkpoint_every: int = 100
    append_prev_action: bool = False
    early_stop_theta: float = 0.01
    early_stop_patience: int = 20

    def validate(self):
        if self.checkpoint_every < 1 or self.early_stop_patience < 1:
            raise DomainError("checkpoint_every and early_stop_patience must be >= 1")
        if self.early_stop_theta < 0:
            raise DomainError("early_stop_theta must be >= 0")


@dataclass
class BatchRecord:
    batch: int
    phase: str
    states: list          # true (or surrogate) absolute states, T + 1 rows
    estimates: list       # state fed to the agent at t = 0..T-1
    actions: list         # executed agent action a_t
    u_ilc: list
    u_applied: list
    theta: list
    rewards: list
    mse: float
    C_B_final: float
    kf: dict = field(default_factory=dict)

    @property
    def mean_theta(self) -> float:
        return float(np.mean(self.theta)) if self.theta else 0.0

    @property
    def mean_gap(self) -> float:
        if not self.u_ilc:
            return float("nan")
        return float(np.mean(np.abs(np.asarray(self.u_ilc) - np.asarray(self.actions))))

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- small pieces


def fusion_weight(a, u_ilc, counter, cfg: FusionConfig = FusionConfig()) -> float:
    """``(1 - exp(-rate |a - u_ILC|)) (K - counter) / K``."""
    if not 0 <= counter <= cfg.K:
        raise DomainError(f"fusion counter {counter} outside [0, {cfg.K}]")
    return float((1.0 - math.exp(-cfg.rate * abs(float(a) - float(u_ilc)))) * (cfg.K - counter) / cfg.K)


def fuse_action(a, u_ilc, theta) -> float:
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"fusion weight {theta} outside [0, 1]")
    return float(np.clip(theta * float(u_ilc) + (1.0 - theta) * float(a), U_MIN, U_MAX))


def discrete_reward(error, cfg: RewardConfig = RewardConfig()) -> float:
    """Table lookup on ``|error|`` with strict upper band edges; the last band is open."""
    e = abs(float(error))
    for thr, val in zip(cfg.thresholds, cfg.values):
        if e < thr:
            return val
    return cfg.values[-1]


def step_reward(a, u_ref, x_est, x_ref, cfg: RewardConfig = RewardConfig()):
    """Returns ``(r, r_c, r_d)`` with ``r = r_c + r_d``."""
    r_c = -cfg.alpha * abs(float(u_ref) - float(a))
    r_d = cfg.beta * discrete_reward(float(x_est) - float(x_ref), cfg)
    return r_c + r_d, r_c, r_d


def evaluate_mse(states, nominal_x) -> float:
    """Mean squared reactor-temperature deviation over ``t = 1..T``."""
    states = np.asarray(states, dtype=float)
    nominal_x = np.asarray(nominal_x, dtype=float)
    if states.shape != nominal_x.shape:
        raise DomainError(f"trajectory shape {states.shape} does not match nominal {nominal_x.shape}")
    return float(np.mean((states[1:, T_INDEX] - nominal_x[1:, T_INDEX]) ** 2))


def _agent_state(x, prev_action, cfg: TrainingConfig):
    return np.append(x, prev_action) if cfg.append_prev_action else np.asarray(x, dtype=float)


def n_state_for(cfg: TrainingConfig, base: int = 4) -> int:
    return base + (1 if cfg.append_prev_action else 0)


def _context(err: BatchLoopError, where: str) -> BatchLoopError:
    err.args = (f"{where}: {err.args[0] if err.args else ''}",) + tuple(err.args[1:])
    return err


# --------------------------------------------------------- linear surrogate


class LtvSurrogateEnv:
    """Linear stand-in for the process, stepping the lifted deviation model.

    The disturbance follows the same repetitive-plus-random structure as the
    process (offset, batch-wise drift, within-batch noise) but is drawn from
    its own random streams, and measurements carry the same noise levels.
    """

    def __init__(self, model: LiftedBatchModel, noise: NoiseConfig = NoiseConfig(), offset: float = 0.0):
        if model.nominal_x is None or model.nominal_u is None:
            raise DomainError("the surrogate needs a lifted model with its nominal trajectory")
        self.model, self.noise, self.offset = model, noise, offset
        self.k = 0

    def _rng(self, *tags):
        return np.random.default_rng([self.noise.seed, 7, *tags])

    def reset(self, k: int):
        m = self.model
        T = m.T
        w = math.sqrt(self.noise.var_w) * self._rng(1).standard_normal((max(k - 1, 0), T))
        self.d = self.offset + w.sum(axis=0) + math.sqrt(self.noise.var_v) * self._rng(2, k).standard_normal(T)
        r = self._rng(3, k)
        self._m = math.sqrt(self.noise.var_m) * r.standard_normal((T, N_Z))
        self._n = math.sqrt(self.noise.var_n) * r.standard_normal(N_Y)
        self.k = k
        self.t = 0
        self._du = np.zeros(T * m.n_u)
        self._x = [np.zeros(m.n_x)]

    def step(self, u: float) -> np.ndarray:
        m, t = self.model, self.t
        if not U_MIN <= u <= U_MAX:
            raise DomainError(f"input {u} outside [{U_MIN}, {U_MAX}]")
        self._du[t] = u - m.nominal_u[t]
        rows = slice(t * m.n_x, (t + 1) * m.n_x)
        x = m.Psi_u[rows, :t + 1] @ self._du[:t + 1] + m.Psi_d[rows, :t + 1] @ self.d[:t + 1]
        self._x.append(x)
        self.t = t + 1
        return m.nominal_x[t + 1][list(OBS_INDEX)] + x[list(OBS_INDEX)] + self._m[t]

    def terminal_quality(self) -> np.ndarray:
        if self.t != self.model.T:
            raise IndexError("terminal quality is only available at the end of the batch")
        return self.model.nominal_x[-1][list(QUALITY_INDEX)] + self._x[-1][list(QUALITY_INDEX)] + self._n

    @property
    def states(self) -> np.ndarray:
        return self.model.nominal_x[:len(self._x)] + np.array(self._x)


# -------------------------------------------------------------- persistence


class RunWriter:
    """Streams records, learning-curve rows and checkpoints into ``out_dir``."""

    def __init__(self, out_dir, checkpoint_every: int = 100):
        self.out = Path(out_dir)
        (self.out / "records").mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.checkpoint_every = checkpoint_every
        self.curve: list[dict] = []

    def record(self, rec: BatchRecord, agent: PpoAgent | None, failed: bool = False):
        suffix = "_failed" if failed else ""
        path = self.out / "records" / f"batch_{rec.batch:04d}{suffix}.json"
        path.write_text(json.dumps(rec.to_dict(), indent=1))
        if failed:
            return
        self.curve.append({"episode": rec.batch, "reward": rec.total_reward, "mse": rec.mse,
                           "mean_theta": rec.mean_theta, "mean_gap": rec.mean_gap})
        if agent is not None and rec.batch % self.checkpoint_every == 0:
            agent.save(self.out / "checkpoints" / f"agent_{rec.batch:04d}.json")

    def finish(self, agent: PpoAgent | None):
        write_learning_curve(self.out / "learning_curve.csv", self.curve)
        if agent is not None:
            agent.save(self.out / "checkpoints" / "agent_final.json")


def write_learning_curve(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r["episode"]] + [repr(float(r[c])) for c in CURVE_COLUMNS[1:]])


def read_learning_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "episode" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def curve_rows(records) -> list[dict]:
    return [{"episode": r.batch, "reward": r.total_reward, "mse": r.mse, "mean_theta": r.mean_theta,
             "mean_gap": r.mean_gap} for r in records]


# -------------------------------------------------------------------- loops


def _finish_episode(agent, informer, y_T, rec_kf):
    if informer is not None:
        rec_kf.update(informer.finish_batch(y_T).to_dict())
    if agent is not None and agent.ready():
        rec_kf["ppo"] = agent.update()


def pretrain_offline(agent: PpoAgent | None, informer: HierarchicalIlc, env: LtvSurrogateEnv,
                     n_episodes: int, reward: RewardConfig = RewardConfig(),
                     cfg: TrainingConfig = TrainingConfig(), writer: RunWriter | None = None):
    """Imitation of the informer on the linear surrogate.

    The surrogate is always driven by ``u_ILC``; the agent's action only
    enters the reward ``-alpha |u_ILC - a|``. ``agent`` may be ``None`` to run
    the informer alone.
    """
    model = informer.model
    records = []
    for k in range(1, n_episodes + 1):
        env.reset(k)
        informer.start_batch()
        x_hat = informer.state_estimate()
        prev = 0.0
        rec = BatchRecord(k, "offline", [], [], [], [], [], [], [], 0.0, 0.0)
        pending = []
        try:
            for t in range(model.T):
                u_ilc = informer.compute_action()
                s_raw = _agent_state(x_hat, prev, cfg)
                if agent is not None:
                    s = agent.observe(s_raw)
                    a, raw, logp, v = agent.act(s)
                    a = float(a[0])
                    r = -reward.alpha * abs(u_ilc - a)
                    pending.append(Transition(s, raw, logp, r, v, t == model.T - 1))
                else:
                    a, r = u_ilc, 0.0
                z = env.step(u_ilc)
                x_hat = informer.observe(u_ilc, z)
                rec.estimates.append(s_raw.tolist())
                rec.actions.append(a)
                rec.u_ilc.append(u_ilc)
                rec.u_applied.append(u_ilc)
                rec.theta.append(1.0)
                rec.rewards.append(r)
                prev = a
            for tr in pending:
                agent.store(tr)
            _finish_episode(agent, informer, env.terminal_quality(), rec.kf)
        except BatchLoopError as err:
            raise _context(err, f"offline episode {k}, step {len(rec.u_ilc)}") from err
        states = env.states
        rec.states = states.tolist()
        rec.mse = evaluate_mse(states, model.nominal_x)
        rec.C_B_final = float(states[-1, 1])
        records.append(rec)
        if writer is not None:
            writer.record(rec, agent)
    if writer is not None:
        writer.finish(agent)
    return agent, records


def _run_plant_episode(k, plant, agent, informer, nominal_x, reward, fusion, cfg, phase, theta_override,
                       u_ref_fallback):
    T = nominal_x.shape[0] - 1
    rec = BatchRecord(k, phase, [], [], [], [], [], [], [], 0.0, 0.0)
    x0 = np.asarray(plant.states[0])
    obs = informer.state_estimate() if informer is not None else x0[list(OBS_INDEX)]
    prev = 0.0
    pending = []
    for t in range(T):
        u_ilc = informer.compute_action() if informer is not None else float(u_ref_fallback[t])
        s_raw = _agent_state(obs, prev, cfg)
        s = agent.observe(s_raw)
        a_exec, raw, logp, v = agent.act(s)
        a = float(a_exec[0])
        if informer is None:
            theta = 0.0
        elif theta_override is not None:
            theta = float(theta_override)
        else:
            counter = k if fusion.index_mode == "episode" else t
            theta = fusion_weight(a, u_ilc, min(counter, fusion.K), fusion)
        u = fuse_action(a, u_ilc, theta)
        z = plant.step(u)
        if informer is not None:
            obs = informer.observe(u, z)
            T_est = obs[T_INDEX]
        else:
            obs = z
            T_est = z[0]
        r, _, _ = step_reward(a, u_ilc, T_est, nominal_x[t + 1, T_INDEX], reward)
        pending.append(Transition(s, raw, logp, r, v, t == T - 1))
        rec.estimates.append(s_raw.tolist())
        rec.actions.append(a)
        rec.u_ilc.append(u_ilc)
        rec.u_applied.append(u)
        rec.theta.append(theta)
        rec.rewards.append(r)
        prev = a
    for tr in pending:
        agent.store(tr)
    _finish_episode(agent, informer, plant.terminal_quality(), rec.kf)
    return rec


def _plant_loop(agent, informer, nominal_x, noise, n_episodes, reward, fusion, cfg, phase, writer,
                params, grid, theta_override=None, u_ref=None):
    records = []
    quiet = 0
    for k in range(1, n_episodes + 1):
        plant = PlantBatch(noise, k, params, grid)
        if informer is not None:
            informer.start_batch()
        try:
            rec = _run_plant_episode(k, plant, agent, informer, nominal_x, reward, fusion, cfg, phase,
                                     theta_override, u_ref)
        except BatchLoopError as err:
            if writer is not None:
                partial = BatchRecord(k, phase, [list(map(float, s)) for s in plant.states], [], [],
                                      [], list(plant.u), [], [], float("nan"), float("nan"),
                                      {"error": str(err)})
                writer.record(partial, None, failed=True)
                writer.finish(None)
            raise _context(err, f"{phase} episode {k}, step {plant.t}") from err
        states = np.array(plant.states)
        rec.states = states.tolist()
        rec.mse = evaluate_mse(states, nominal_x)
        rec.C_B_final = float(states[-1, 1])
        records.append(rec)
        if writer is not None:
            writer.record(rec, agent)
        if informer is not None and theta_override is None:
            quiet = quiet + 1 if rec.mean_theta < cfg.early_stop_theta else 0
            if quiet >= cfg.early_stop_patience:
                log.info("early stop after %d episodes: mean fusion weight below %g", k, cfg.early_stop_theta)
                break
    if writer is not None:
        writer.finish(agent)
    return agent, records


def train_online(agent: PpoAgent, informer: HierarchicalIlc, noise: NoiseConfig, n_episodes: int,
                 reward: RewardConfig = RewardConfig(), fusion: FusionConfig = FusionConfig(),
                 cfg: TrainingConfig = TrainingConfig(), writer: RunWriter | None = None,
                 params: ReactorParams = ReactorParams(), grid: BatchTimeGrid = BatchTimeGrid(),
                 theta_override: float | None = None):
    """Fused control of the process; ``theta_override`` pins the fusion weight (for ablations)."""
    return _plant_loop(agent, informer, informer.model.nominal_x, noise, n_episodes, reward, fusion, cfg,
                       "online", writer, params, grid, theta_override)


def train_baseline_ppo(agent: PpoAgent, nominal_x, nominal_u, noise: NoiseConfig, n_episodes: int,
                       reward: RewardConfig = RewardConfig(), cfg: TrainingConfig = TrainingConfig(),
                       writer: RunWriter | None = None, params: ReactorParams = ReactorParams(),
                       grid: BatchTimeGrid = BatchTimeGrid()):
    """Plain PPO on the process with raw ``(T, T_J)`` measurements as state.

    There is no informer, so the continuous reward term is measured against
    the nominal input.
    """
    return _plant_loop(agent, None, np.asarray(nominal_x), noise, n_episodes, reward, FusionConfig(), cfg,
                       "baseline", writer, params, grid, None, np.asarray(nominal_u))
