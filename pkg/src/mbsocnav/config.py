"""One JSON document configures every module; each top-level key is a section."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .evaluate import EvalConfig
from .lidar import LidarConfig
from .mbpo import LoopConfig
from .obsmap import GridConfig, Norms
from .policy import TD3Config
from .reward import RewardConfig
from .sim import Scenario, SimConfig
from .world_model import ModelConfig

SECTIONS = {
    "sim": SimConfig, "lidar": LidarConfig, "grid": GridConfig, "norms": Norms,
    "reward": RewardConfig, "model": ModelConfig, "td3": TD3Config, "loop": LoopConfig,
    "scenario": Scenario, "eval": EvalConfig,
}


def _section(cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    extra = set(data) - set(names)
    if extra:
        raise ConfigurationError(f"unknown {cls.__name__} fields {sorted(extra)}")
    # JSON has no tuples
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**data)


@dataclass(frozen=True)
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    norms: Norms = field(default_factory=Norms)
    reward: RewardConfig = field(default_factory=RewardConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    td3: TD3Config = field(default_factory=TD3Config)
    loop: LoopConfig = field(default_factory=LoopConfig)
    scenario: Scenario = field(default_factory=Scenario)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        """Cross-section consistency; raised before anything is simulated."""
        if self.sim.goal_tolerance != self.reward.goal_tolerance:
            raise ConfigurationError("sim.goal_tolerance and reward.goal_tolerance differ")
        g, m = self.grid, self.model
        if g.height % self.td3.pool or g.width % self.td3.pool:
            raise ConfigurationError("grid size must be divisible by td3.pool")
        down = m.enc1_stride * m.enc2_stride
        if g.height % down or g.width % down:
            raise ConfigurationError(f"grid size must be divisible by the encoder stride product {down}")
        if self.loop.E < max(m.batch_size, 1) and not self.loop.ablation:
            raise ConfigurationError("loop.E must cover at least one model batch")
        return self

    def to_dict(self) -> dict:
        return {k: dataclasses.asdict(getattr(self, k)) for k in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        extra = set(d) - set(SECTIONS)
        if extra:
            raise ConfigurationError(f"unknown config sections {sorted(extra)}")
        return cls(**{k: _section(SECTIONS[k], v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh)).validate()

    def replace(self, **sections) -> "Config":
        """Copy with some sections swapped, e.g. ``cfg.replace(loop=...)``."""
        return dataclasses.replace(self, **sections)

    def with_overrides(self, section: str, **values) -> "Config":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})
