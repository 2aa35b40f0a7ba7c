"""Experiment configuration: JSON schema, defaults and validation.

A configuration is a JSON object whose sections mirror the dataclasses below.
Omitted keys take their defaults, unknown keys are rejected, and every error
carries the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DomainError
from .kf_ilc import IlcObjective, NoiseCovariances
from .ppo_agent import PpoHyperparams
from .reactor_sim import U_MAX, U_MIN, BatchTimeGrid, NoiseConfig, ReactorParams
from .rto import RtoConfig
from .training import FusionConfig, RewardConfig, TrainingConfig

CONFIG_VERSION = 1
KINDS = ("rto", "ilc", "pretrain", "online", "baseline", "compare")


@dataclass(frozen=True)
class NoiseSection:
    var_v: float = 0.3
    var_w: float = 0.4
    var_m: float = 0.06
    var_n: float = 0.005

    def validate(self):
        self.noise(0).validate()

    def noise(self, seed: int) -> NoiseConfig:
        return NoiseConfig(self.var_v, self.var_w, self.var_m, self.var_n, seed)


@dataclass(frozen=True)
class BoundsSection:
    u_min: float = U_MIN
    u_max: float = U_MAX
    T_min: float = 298.0
    T_max: float = 378.0

    def validate(self):
        if not (U_MIN <= self.u_min < self.u_max <= U_MAX):
            raise DomainError(f"flow bounds must satisfy {U_MIN} <= u_min < u_max <= {U_MAX} L/s")
        if not self.T_min < self.T_max:
            raise DomainError("temperature bounds must be ordered")


@dataclass(frozen=True)
class RtoSection:
    C_B_sp: float = 0.58
    k_cost: float = 0.05
    u_init: float = 2.0
    max_iters: int = 300
    step_size: float = 1.0
    fd_step: float = 1e-5
    temp_penalty_weight: float = 1e3
    grad_tol: float = 1e-6
    stall_tol: float = 1e-8
    stall_iters: int = 10


@dataclass(frozen=True)
class IlcSection:
    p0: float = 1.0
    tol: float = 1e-8
    max_iters: int = 5000

    def validate(self):
        if self.p0 <= 0 or self.tol <= 0 or self.max_iters < 1:
            raise DomainError("p0, tol and max_iters must be positive")


@dataclass(frozen=True)
class EpisodeSection:
    ilc_batches: int = 30
    pretrain: int = 500
    online: int = 1000
    baseline: int = 1000

    def validate(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise DomainError(f"{f.name} must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    kind: str = "rto"
    seeds: tuple[int, ...] = (0,)
    output_dir: str = ""
    cache_dir: str = ""
    reactor: ReactorParams = field(default_factory=ReactorParams)
    noise: NoiseSection = field(default_factory=NoiseSection)
    grid: BatchTimeGrid = field(default_factory=BatchTimeGrid)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    rto: RtoSection = field(default_factory=RtoSection)
    ilc: IlcSection = field(default_factory=IlcSection)
    ppo: PpoHyperparams = field(default_factory=PpoHyperparams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    episodes: EpisodeSection = field(default_factory=EpisodeSection)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}, expected {CONFIG_VERSION}", "version")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}", "kind")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "seeds")
        if any(s < 0 for s in self.seeds) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct non-negative integers", "seeds")
        if not self.bounds.u_min <= self.rto.u_init <= self.bounds.u_max:
            raise ConfigError("u_init must lie inside the flow bounds", "rto.u_init")

    # ------------------------------------------------------ derived configs

    def rto_config(self) -> RtoConfig:
        r = self.rto
        return RtoConfig(r.C_B_sp, r.k_cost, (self.bounds.u_min, self.bounds.u_max),
                         (self.bounds.T_min, self.bounds.T_max), r.u_init, r.max_iters, r.step_size, r.fd_step,
                         r.temp_penalty_weight, r.grad_tol, r.stall_tol, r.stall_iters)

    def ilc_objective(self, C_B_nom_final: float) -> IlcObjective:
        return IlcObjective(C_B_nom_final, self.rto.C_B_sp, self.rto.k_cost, self.reactor.V,
                            (self.bounds.u_min, self.bounds.u_max), 1, self.ilc.tol, self.ilc.max_iters)

    def covariances(self) -> NoiseCovariances:
        n = self.noise
        return NoiseCovariances.from_variances(n.var_w, n.var_v, n.var_m, n.var_n)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


# ------------------------------------------------------------- validation


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected an object, got {type(value).__name__}", path)
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"expected {len(args)} entries, got {len(value)}", path)
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        if not math.isfinite(value):
            raise ConfigError("expected a finite number", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise ConfigError(f"unsupported field type {_type_name(tp)}", path)


def _build(cls, raw: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown key; allowed keys are {', '.join(names)}", sub)
        kwargs[key] = _coerce(value, hints[key], sub)
    try:
        obj = cls(**kwargs)
    except TypeError as err:
        raise ConfigError(str(err), path) from err
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except DomainError as err:
            raise ConfigError(str(err), path or cls.__name__) from err
    return obj


def validate_config(text: str) -> ExperimentConfig:
    """Parse a JSON document into a fully populated :class:`ExperimentConfig`."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
    if not isinstance(raw, dict):
        raise ConfigError("the configuration must be a JSON object")
    return _build(ExperimentConfig, raw)


def load_config(path) -> ExperimentConfig:
    """Read and validate a configuration file; I/O errors propagate as :class:`OSError`."""
    return validate_config(Path(path).read_text(encoding="utf-8"))


def config_to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2)


def config_hash(cfg) -> str:
    """Git blob hash (SHA-1 over ``blob <len>\\0<content>``) of the canonical JSON form."""
    data = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
