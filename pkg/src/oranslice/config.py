"""Scenario and learner configuration.

All parameters live in one nested :class:`SimConfig` that round-trips through
JSON. ``SimConfig()`` is the reference scenario: 3 slices, 7 DUs, 100 RBs of
200 kHz, 60 users on a 3000 m x 2000 m area.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class SliceSpec:
    id: int
    name: str
    qos_target: float  # lambda_l, Mbps per user
    qos_margin: float  # epsilon_l, Mbps
    packet_len: float  # Z_l, bits
    mean_demand: float  # bits/s
    n_users: int

    def validate(self) -> None:
        if self.qos_target <= 0 or self.qos_margin <= 0 or self.packet_len <= 0:
            raise ConfigError(f"slice {self.name}: target, margin and packet length must be > 0")
        if self.mean_demand < 0 or self.n_users < 0:
            raise ConfigError(f"slice {self.name}: negative demand or population")


def default_slices() -> list[SliceSpec]:
    # targets equal the per-service traffic means; margins are 5% of target
    return [
        SliceSpec(0, "eMBB", 3.0, 0.15, 12_000.0, 3.0e6, 20),
        SliceSpec(1, "MTC", 0.15, 0.0075, 800.0, 150.0e3, 30),
        SliceSpec(2, "URLLC", 0.75, 0.0375, 256.0, 750.0e3, 10),
    ]


def thermal_noise_watts(bandwidth_hz: float, noise_figure_db: float = 9.0) -> float:
    dbm = -174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class ChannelParams:
    rb_bandwidth: float = 200e3
    num_rbs: int = 100
    path_loss_exp: float = 3.0
    noise_var: float = field(default_factory=lambda: thermal_noise_watts(200e3))

    def validate(self) -> None:
        if self.num_rbs <= 0:
            raise ConfigError("num_rbs must be positive")
        if self.path_loss_exp < 2:
            raise ConfigError("path_loss_exp must be >= 2")
        if self.noise_var <= 0 or self.rb_bandwidth <= 0:
            raise ConfigError("noise_var and rb_bandwidth must be positive")


@dataclass
class TopologyConfig:
    width: float = 3000.0
    height: float = 2000.0
    n_dus: int = 7
    du_radius: float = 1000.0
    tx_power_per_rb: float = 0.2  # watts

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("area must be positive")
        if self.n_dus < 1:
            raise ConfigError("need at least one DU")
        if self.tx_power_per_rb < 0:
            raise ConfigError("tx_power_per_rb must be >= 0")


@dataclass
class MobilityConfig:
    speed_min: float = 10.0
    speed_max: float = 20.0
    slot: float = 1.0  # seconds per environment step
    mode_switch_prob: float = 0.01
    mode_multipliers: tuple[float, float, float, float] = (0.0, 0.5, 1.0, 1.5)
    mobile: bool = True

    def validate(self) -> None:
        if not 0 <= self.speed_min <= self.speed_max:
            raise ConfigError("invalid speed range")
        if self.slot <= 0:
            raise ConfigError("slot must be positive")
        if not 0 <= self.mode_switch_prob <= 1:
            raise ConfigError("mode_switch_prob outside [0, 1]")
        if len(self.mode_multipliers) != 4 or min(self.mode_multipliers) < 0:
            raise ConfigError("need four non-negative mode multipliers")


@dataclass
class PredictorConfig:
    look_back: int = 18
    hidden: int = 50
    layers: int = 2
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-4
    patience: int = 10
    trace_steps: int = 5000
    val_fraction: float = 0.2
    residual: bool = True

    def validate(self) -> None:
        if self.look_back < 1 or self.hidden < 1 or self.layers < 1:
            raise ConfigError("look_back, hidden and layers must be >= 1")
        if self.trace_steps <= self.look_back:
            raise ConfigError("trace_steps must exceed look_back")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction outside (0, 1)")


@dataclass
class SacConfig:
    gamma: float = 0.99
    beta: float = 0.2
    batch_size: int = 256
    tau: float = 0.005
    lr: float = 1e-4
    hidden: tuple[int, ...] = (128, 256, 256)
    buffer_capacity: int = 100_000
    updates_per_iteration: int = 20
    reward_scale: float = 1e-3  # rewards are multiplied by this before entering the critic

    def validate(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma outside (0, 1]")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau outside (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigError("batch_size and buffer_capacity must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale must be positive")


@dataclass
class SimConfig:
    seed: int = 0
    slices: list[SliceSpec] = field(default_factory=default_slices)
    channel: ChannelParams = field(default_factory=ChannelParams)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    iterations: int = 500  # N_t
    n_actors: int = 7  # N_m
    n_evals: int = 1  # N_e
    episode_len: int = 200
    eval_episodes: int = 5
    prediction: bool = True
    frozen_channel: bool = False
    converge_tol: float = 1e-5
    converge_window: int = 50
    out_dir: str = "runs"

    @property
    def n_users(self) -> int:
        return sum(s.n_users for s in self.slices)

    def validate(self) -> None:
        if not self.slices:
            raise ConfigError("at least one slice required")
        for i, s in enumerate(self.slices):
            if s.id != i:
                raise ConfigError("slice ids must be 0..L-1 in order")
            s.validate()
        for part in (self.channel, self.topology, self.mobility, self.predictor, self.sac):
            part.validate()
        if self.n_users < 1:
            raise ConfigError("no users configured")
        if self.iterations < 0 or self.n_evals < 0 or self.episode_len < 1:
            raise ConfigError("invalid loop counts")
        if self.n_actors < 1:
            raise ConfigError("need at least one actor")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimConfig":
        return _build(cls, data)

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_dict(data)
        cfg.validate()
        return cfg


_NESTED = {
    "channel": ChannelParams,
    "topology": TopologyConfig,
    "mobility": MobilityConfig,
    "predictor": PredictorConfig,
    "sac": SacConfig,
}


def _build(cls, data: dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if cls is SimConfig and key == "slices":
            kwargs[key] = [_build(SliceSpec, s) for s in value]
        elif cls is SimConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
