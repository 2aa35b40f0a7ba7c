"""Seeded experiment runners and the per-run manifest.

Each seed runs in its own subdirectory ``<output_dir>/seed_<N>`` with its own
random streams. ``manifest.json`` is written last and lists every file the
run produced.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, config_to_dict
from .errors import BatchLoopError
from .kf_ilc import HierarchicalIlc
from .lifted_model import LiftedBatchModel, linearize_nominal
from .ppo_agent import PpoAgent
from .reactor_sim import PlantBatch
from .rto import NominalTrajectory, load_nominal, optimize_nominal, save_nominal
from .training import (
    BatchRecord,
    LtvSurrogateEnv,
    RunWriter,
    evaluate_mse,
    n_state_for,
    pretrain_offline,
    train_baseline_ppo,
    train_online,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

ILC_CURVE_COLUMNS = ("batch", "mse", "C_B_final", "cb_error", "trace_P", "ilc_objective")
COMPARE_COLUMNS = ("seed", "episode", "mse_ilcirl", "mse_baseline")


@dataclass
class RunManifest:
    kind: str
    seed: int
    config: dict
    config_hash: str
    started: str
    finished: str = ""
    status: str = "running"
    exit_code: int = EXIT_OK
    error: str = ""
    summary: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)
    sha256: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finite(x):
    return float(x) if math.isfinite(float(x)) else None


# ------------------------------------------------------------- shared parts


def nominal_for(cfg: ExperimentConfig) -> NominalTrajectory:
    """Solve the economic problem, reusing ``cache_dir`` when it holds a matching result."""
    rto_cfg = cfg.rto_config()
    if not cfg.cache_dir:
        return optimize_nominal(rto_cfg, cfg.reactor, cfg.grid)
    key = config_hash({"rto": cfg.rto, "bounds": cfg.bounds, "reactor": cfg.reactor, "grid": cfg.grid})
    cache = Path(cfg.cache_dir) / f"nominal_{key[:16]}"
    if (cache / "nominal.json").exists():
        log.info("using cached nominal trajectory in %s", cache)
        return load_nominal(cache)
    nom = optimize_nominal(rto_cfg, cfg.reactor, cfg.grid)
    save_nominal(nom, cache, rto_cfg, cfg.grid)
    # reload so cached and fresh runs see identical floats
    return load_nominal(cache)


def make_informer(cfg: ExperimentConfig, model: LiftedBatchModel, nom: NominalTrajectory) -> HierarchicalIlc:
    return HierarchicalIlc(model, cfg.covariances(), cfg.ilc_objective(nom.C_B_final), cfg.ilc.p0)


def run_ilc_batches(informer: HierarchicalIlc, noise, n_batches: int, params, grid,
                    writer: RunWriter | None = None) -> list[BatchRecord]:
    """The informer alone on the process for ``n_batches`` consecutive batches."""
    nominal_x = informer.model.nominal_x
    records = []
    for k in range(1, n_batches + 1):
        plant = PlantBatch(noise, k, params, grid)
        informer.start_batch()
        rec = BatchRecord(k, "ilc", [], [], [], [], [], [], [], 0.0, 0.0)
        for t in range(grid.n_steps):
            u = informer.compute_action()
            z = plant.step(u)
            x_hat = informer.observe(u, z)
            rec.estimates.append(x_hat.tolist())
            rec.actions.append(u)
            rec.u_ilc.append(u)
            rec.u_applied.append(u)
            rec.theta.append(1.0)
            rec.rewards.append(0.0)
        rec.kf.update(informer.finish_batch(plant.terminal_quality()).to_dict())
        states = np.array(plant.states)
        rec.states = states.tolist()
        rec.mse = evaluate_mse(states, nominal_x)
        rec.C_B_final = float(states[-1, 1])
        records.append(rec)
        log.info("ilc batch %d: mse %.4g, C_B %.4f", k, rec.mse, rec.C_B_final)
        if writer is not None:
            writer.record(rec, None)
    if writer is not None:
        writer.finish(None)
    return records


def write_ilc_curve(path, records, C_B_sp: float):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ILC_CURVE_COLUMNS)
        for r in records:
            w.writerow([r.batch, repr(r.mse), repr(r.C_B_final), repr(abs(r.C_B_final - C_B_sp)),
                        repr(float(r.kf["trace_P"])), repr(float(r.kf["ilc_objective"]))])


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def _ilcirl(cfg, seed, out, model, nom, summary):
    """Offline pretraining followed by online fused training."""
    noise = cfg.noise.noise(seed)
    agent = PpoAgent(n_state_for(cfg.training), cfg.ppo, seed=seed)
    env = LtvSurrogateEnv(model, noise, cfg.reactor.offset)
    writer = RunWriter(out / "pretrain", cfg.training.checkpoint_every)
    _, pre = pretrain_offline(agent, make_informer(cfg, model, nom), env, cfg.episodes.pretrain, cfg.reward,
                              cfg.training, writer)
    gaps = [r.mean_gap for r in pre]
    summary["pretrain"] = {"episodes": len(pre), "gap_first10": _mean(gaps[:10]), "gap_last10": _mean(gaps[-10:])}
    if cfg.kind == "pretrain":
        return agent, pre
    writer = RunWriter(out / "online", cfg.training.checkpoint_every)
    _, on = train_online(agent, make_informer(cfg, model, nom), noise, cfg.episodes.online, cfg.reward,
                         cfg.fusion, cfg.training, writer, cfg.reactor, cfg.grid)
    theta = [r.mean_theta for r in on]
    tenth = max(1, len(on) // 10)
    summary["online"] = {"episodes": len(on), "theta_first": _mean(theta[:tenth]),
                         "theta_last": _mean(theta[-tenth:]), "mse_episode1": on[0].mse,
                         "mse_last": on[-1].mse}
    return agent, on


def _baseline(cfg, seed, out, nom, summary):
    agent = PpoAgent(2, cfg.ppo, seed=seed)
    writer = RunWriter(out / "baseline", cfg.training.checkpoint_every)
    _, recs = train_baseline_ppo(agent, nom.x_nom, nom.u_nom, cfg.noise.noise(seed), cfg.episodes.baseline,
                                 cfg.reward, cfg.training, writer, cfg.reactor, cfg.grid)
    summary["baseline"] = {"episodes": len(recs), "mse_episode1": recs[0].mse, "mse_last": recs[-1].mse}
    return recs


def _run_kind(cfg: ExperimentConfig, seed: int, out: Path, summary: dict):
    nom = nominal_for(cfg)
    save_nominal(nom, out, cfg.rto_config(), cfg.grid)
    summary["rto"] = {"J": nom.J, "C_B_final": nom.C_B_final, "iterations": nom.iterations,
                      "converged": nom.converged, "reason": nom.reason}
    if cfg.kind == "rto":
        return
    model = linearize_nominal(nom, cfg.grid, cfg.reactor)
    if cfg.kind == "ilc":
        writer = RunWriter(out / "ilc", cfg.training.checkpoint_every)
        recs = run_ilc_batches(make_informer(cfg, model, nom), cfg.noise.noise(seed), cfg.episodes.ilc_batches,
                               cfg.reactor, cfg.grid, writer)
        write_ilc_curve(out / "ilc" / "ilc_curve.csv", recs, cfg.rto.C_B_sp)
        summary["ilc"] = {"batches": len(recs), "mse_first": recs[0].mse, "mse_last": recs[-1].mse,
                          "cb_error_first": abs(recs[0].C_B_final - cfg.rto.C_B_sp),
                          "cb_error_last": abs(recs[-1].C_B_final - cfg.rto.C_B_sp)}
        return
    if cfg.kind in ("pretrain", "online"):
        _ilcirl(cfg, seed, out, model, nom, summary)
        return
    if cfg.kind == "baseline":
        _baseline(cfg, seed, out, nom, summary)
        return
    # compare: both pipelines from identical seeds and hyperparameters
    _, on = _ilcirl(cfg, seed, out, model, nom, summary)
    base = _baseline(cfg, seed, out, nom, summary)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for a, b in zip(on, base):
            w.writerow([seed, a.batch, repr(a.mse), repr(b.mse)])


def _clean(obj):
    """Replace non-finite floats so the manifest stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def run_seed(cfg: ExperimentConfig, seed: int, out_dir) -> RunManifest:
    """Run one seed of ``cfg.kind`` into ``out_dir`` and write its manifest last.

    Numerical failures are recorded in the manifest (exit code 3); I/O
    failures other than writing the manifest itself likewise (exit code 4).
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    echo = config_to_dict(cfg)
    echo["seeds"] = [seed]
    # the hash identifies the experiment, not where its files went
    key = replace(cfg, seeds=(seed,), output_dir="", cache_dir="")
    man = RunManifest(cfg.kind, seed, echo, config_hash(key), _now())
    try:
        _run_kind(cfg, seed, out, man.summary)
        man.status = "ok"
    except BatchLoopError as err:
        log.error("seed %d failed: %s", seed, err)
        man.status, man.exit_code, man.error = "failed", EXIT_NUMERIC, f"{type(err).__name__}: {err}"
    except OSError as err:
        log.error("seed %d failed: %s", seed, err)
        man.status, man.exit_code, man.error = "failed", EXIT_IO, f"{type(err).__name__}: {err}"
    man.finished = _now()
    produced = sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file())
    man.sha256 = {p: _sha256(out / p) for p in produced}
    man.files = sorted(produced + ["manifest.json"])
    man.summary = _clean(man.summary)
    (out / "manifest.json").write_text(json.dumps(man.to_dict(), indent=2, allow_nan=False))
    return man


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[RunManifest]:
    """Run every seed of ``cfg`` into ``<out_dir>/seed_<N>``; one manifest per seed."""
    cfg.validate()
    root = Path(out_dir or cfg.output_dir or ".")
    return [run_seed(cfg, s, root / f"seed_{s}") for s in cfg.seeds]
