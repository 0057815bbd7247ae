"""Trainer configuration and its TOML file format.

Every section and key is optional except ``plant.kind``; unknown keys are
rejected so that typos fail loudly before anything runs.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .plants import PlantConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    mode: str = "delta"
    lr: float = 1e-3
    inner_steps: int = 64
    batch_size: int = 256
    batch_growth: int = 0          # extra minibatch rows per episode; 0 = fixed size
    capacity: int = 0
    stats_freeze_after: int = 10


@dataclass
class PolicySettings:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    lookahead: int = 10
    prev_actions: int = 2
    eta: float = 0.5
    eta_schedule: str = "constant"
    alpha: float = 1.0
    epsilon: float = 1.0
    gamma: float = 1.0
    param_bound: float = 0.0
    init_scale: float = 1.0
    state_scale: tuple = ()
    ref_scale: tuple = ()
    action_scale: tuple = ()


@dataclass
class DiagnosticsSettings:
    oracle_every: int = 0
    fd_step: float = 1e-6
    fd_cap: int = 2000
    drift: bool = True
    snapshot_every: int = 0


@dataclass
class TrainerConfig:
    plant: PlantConfig
    episodes: int = 100
    horizon: int = 200
    trajectories_per_episode: int = 10
    seed: int = 0
    checkpoint_every: int = 10
    payload_schedule: tuple = ()
    model: ModelSettings = field(default_factory=ModelSettings)
    policy: PolicySettings = field(default_factory=PolicySettings)
    diagnostics: DiagnosticsSettings = field(default_factory=DiagnosticsSettings)

    def __post_init__(self):
        self.payload_schedule = tuple((int(e), float(m)) for e, m in self.payload_schedule)
        self.validate()

    @property
    def segment_steps(self) -> int:
        return self.horizon // self.trajectories_per_episode

    def validate(self):
        if self.episodes < 1:
            raise ConfigError("run.episodes must be >= 1")
        if self.horizon < 1 or self.trajectories_per_episode < 1 \
                or self.horizon % self.trajectories_per_episode:
            raise ConfigError("run.horizon must be a positive multiple of run.trajectories_per_episode")
        m, p = self.model, self.policy
        if m.lr < 0 or p.eta < 0:
            raise ConfigError("learning rates must be non-negative")
        if m.inner_steps < 1 or m.batch_size < 1 or m.batch_growth < 0:
            raise ConfigError("model.inner_steps, model.batch_size >= 1 and model.batch_growth >= 0 required")
        if p.epsilon <= 0 or p.alpha < 0 or not 0 < p.gamma <= 1:
            raise ConfigError("policy.epsilon > 0, policy.alpha >= 0 and 0 < policy.gamma <= 1 required")
        if p.eta_schedule not in ("constant", "inv_sqrt"):
            raise ConfigError("policy.eta_schedule must be 'constant' or 'inv_sqrt'")
        eps = [e for e, _ in self.payload_schedule]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("payload.schedule episodes must be strictly increasing")
        if any(mass < 0 for _, mass in self.payload_schedule):
            raise ConfigError("payload masses must be non-negative")
        if self.payload_schedule and self.plant.kind != "arm":
            raise ConfigError("payload schedules only apply to the arm plant")

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            return v
        return {
            "run": {"episodes": self.episodes, "horizon": self.horizon,
                    "trajectories_per_episode": self.trajectories_per_episode,
                    "seed": self.seed, "checkpoint_every": self.checkpoint_every},
            "plant": self.plant.to_dict(),
            "model": {k: clean(v) for k, v in dataclasses.asdict(self.model).items()},
            "policy": {k: clean(v) for k, v in dataclasses.asdict(self.policy).items()},
            "payload": {"schedule": [list(x) for x in self.payload_schedule]},
            "diagnostics": dataclasses.asdict(self.diagnostics),
        }

    def replace(self, **kw) -> "TrainerConfig":
        return dataclasses.replace(self, **kw)


_RUN_KEYS = {"episodes", "horizon", "trajectories_per_episode", "seed", "checkpoint_every"}


def _section(cls, data, name):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    out = {}
    for k, v in data.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**out)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(d: dict) -> TrainerConfig:
    sections = {"run", "plant", "model", "policy", "payload", "diagnostics"}
    unknown = set(d) - sections
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    run = dict(d.get("run", {}))
    bad = set(run) - _RUN_KEYS
    if bad:
        raise ConfigError(f"unknown key(s) in [run]: {', '.join(sorted(bad))}")
    payload = dict(d.get("payload", {}))
    if set(payload) - {"schedule"}:
        raise ConfigError(f"unknown key(s) in [payload]: {', '.join(sorted(set(payload) - {'schedule'}))}")
    try:
        plant = PlantConfig.from_dict(dict(d.get("plant", {})))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[plant]: {exc}") from None
    try:
        return TrainerConfig(plant=plant, payload_schedule=tuple(tuple(x) for x in payload.get("schedule", [])),
                             model=_section(ModelSettings, d.get("model", {}), "model"),
                             policy=_section(PolicySettings, d.get("policy", {}), "policy"),
                             diagnostics=_section(DiagnosticsSettings, d.get("diagnostics", {}), "diagnostics"),
                             **run)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainerConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)
