"""Goal, collision and social reward terms and episode outcome classification."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import ConfigurationError, ContractViolation
from .sim import AgentState, AgentStatus


@dataclass(frozen=True)
class RewardConfig:
    r_arrival: float = 20.0
    r_collision: float = -20.0
    w1: float = -2.5
    w2: float = -0.2
    w3: float = -0.3
    r: float = 0.3
    goal_tolerance: float = 0.3

    def __post_init__(self):
        if not self.r_arrival > 0 > self.r_collision:
            raise ConfigurationError("need r_arrival > 0 > r_collision")
        if not self.r > 0:
            raise ConfigurationError("safety radius r must be positive")


class OutcomeKind(str, enum.Enum):
    RUNNING = "running"
    ARRIVED = "arrived"
    COLLIDED = "collided"
    TIMED_OUT = "timed_out"


_KIND_OF_STATUS = {
    AgentStatus.ACTIVE: OutcomeKind.RUNNING,
    AgentStatus.ARRIVED: OutcomeKind.ARRIVED,
    AgentStatus.COLLIDED: OutcomeKind.COLLIDED,
    AgentStatus.TIMED_OUT: OutcomeKind.TIMED_OUT,
}


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    terminal: bool
    kind: OutcomeKind

    @property
    def done(self) -> bool:
        """True terminal for bootstrapping; a timeout only truncates the episode."""
        return self.kind in (OutcomeKind.ARRIVED, OutcomeKind.COLLIDED)


def goal_term(prev_dist: float, cur_dist: float, cfg: RewardConfig) -> float:
    if cur_dist <= cfg.goal_tolerance:
        return cfg.r_arrival
    return cfg.w1 * (cur_dist - prev_dist)


def collision_term(d: float, collided: bool, cfg: RewardConfig) -> float:
    if collided:
        return cfg.r_collision
    if d <= cfg.r + 1.0:
        return cfg.w2 * (1.0 - d / (cfg.r + 1.0))
    return 0.0


def social_term(d_ped: float, cfg: RewardConfig) -> float:
    if d_ped <= cfg.r + 1.25:
        return cfg.w3 * (1.0 - d_ped / (cfg.r + 1.25))
    return 0.0


def compute_reward(prev: AgentState, cur: AgentState, clearances: tuple[float, float],
                   cfg: RewardConfig = RewardConfig()) -> StepOutcome:
    """R = R_g + R_c + R_s for one agent between consecutive ticks."""
    d, d_ped = clearances
    prev_dist, cur_dist = prev.goal_distance(), cur.goal_distance()
    if not (math.isfinite(prev_dist) and math.isfinite(cur_dist)):
        raise ContractViolation("non-finite goal distance")
    if math.isnan(d) or math.isnan(d_ped) or d < 0 or d_ped < 0:
        raise ContractViolation(f"invalid clearances ({d}, {d_ped})")
    if not all(math.isfinite(v) for v in (cur.pose.x, cur.pose.y, prev.pose.x, prev.pose.y)):
        raise ContractViolation("non-finite pose")
    collided = cur.status is AgentStatus.COLLIDED
    reward = goal_term(prev_dist, cur_dist, cfg) + collision_term(d, collided, cfg) + social_term(d_ped, cfg)
    kind = _KIND_OF_STATUS[cur.status]
    return StepOutcome(reward=reward, terminal=kind is not OutcomeKind.RUNNING, kind=kind)


def max_shaped_magnitude(cfg: RewardConfig, v_max: float, dt: float) -> float:
    """Upper bound on |R_g + R_c + R_s| for a non-terminal step."""
    return abs(cfg.w1) * v_max * dt + abs(cfg.w2) + abs(cfg.w3)
