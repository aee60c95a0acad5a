"""Multi-agent navigation environment with a shared policy, plus scripted policies."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .lidar import LaserScan, LidarConfig, scan
from .obsmap import GridConfig, Observation, ScanHistory, goal_relative
from .reward import RewardConfig, StepOutcome, compute_reward
from .sim import (Action, AgentState, Scenario, SimConfig, V_MAX, W_MAX, W_MIN, WorldState,
                  generate_scenario, min_clearances, step_world)


@dataclass
class Transition:
    """Everything needed to rebuild one agent's (s, a, r, s') later.

    ``ranges`` and ``poses`` hold eleven scans: the first ten form the
    observation stack, the last ten the next one.
    """
    ranges: np.ndarray        # (11, n_beams)
    poses: np.ndarray         # (11, 3) world-frame poses at scan time
    goal_rel: tuple
    vel: Action
    action: Action
    reward: float
    next_goal_rel: tuple
    next_vel: Action
    done: bool
    kind: str


@dataclass
class EnvStep:
    outcome: StepOutcome
    clearances: tuple[float, float]
    main_state: AgentState
    transition: Transition
    peer_transitions: list = field(default_factory=list)


class NavEnv:
    """Runs one scenario family; every active agent acts from the same policy.

    Episodes are tied to the main agent: once it arrives, collides or times
    out the caller resets, which regenerates the scenario with the next seed.
    """

    def __init__(self, scenario: Scenario, sim: SimConfig = SimConfig(), lidar: LidarConfig = LidarConfig(),
                 grid: GridConfig = GridConfig(), reward: RewardConfig = RewardConfig(),
                 noise_rng: Optional[np.random.Generator] = None):
        self.scenario, self.sim, self.lidar = scenario, sim, lidar
        self.grid, self.reward_cfg = grid, reward
        self.noise_rng = noise_rng
        self.episode = -1
        self.world: Optional[WorldState] = None
        self.histories: dict[int, ScanHistory] = {}

    def reset(self, seed: Optional[int] = None) -> WorldState:
        """Start the next episode; by default its seed is the scenario seed plus the episode count."""
        self.episode += 1
        s = self.scenario.seed + self.episode if seed is None else seed
        self.world = generate_scenario(self.scenario.with_seed(s), self.sim)
        self.histories = {i: ScanHistory(self._scan(i)) for i in range(len(self.world.agents))}
        return self.world

    def _scan(self, i: int) -> LaserScan:
        return scan(self.world, i, self.lidar, self.noise_rng)

    @property
    def main_index(self) -> int:
        return self.world.main_index

    @property
    def main_done(self) -> bool:
        return not self.world.main_agent.active

    def observation(self, i: int) -> Observation:
        ag = self.world.agents[i]
        return Observation(maps=self.histories[i].stack(self.grid),
                           goal_rel=goal_relative(ag.pose, ag.goal), vel=ag.vel)

    def observations(self) -> dict[int, Observation]:
        """Decentralized observations of every active agent."""
        return {i: self.observation(i) for i in self.world.active_indices()}

    def step(self, actions: dict[int, Action], record_peers: bool = False) -> EnvStep:
        """Advance all active agents; report the main agent's outcome.

        With ``record_peers`` the transitions of the other agents that were
        active before the step are returned as well.
        """
        if self.world is None:
            raise ContractViolation("reset the environment before stepping")
        if self.main_done:
            raise ContractViolation("main agent already finished; reset first")
        active = self.world.active_indices()
        missing = [i for i in active if i not in actions]
        if missing:
            raise ContractViolation(f"no action for active agents {missing}")
        m = self.main_index
        tracked = active if record_peers else [m]
        before = {i: (self.world.agents[i], list(self.histories[i].ranges), list(self.histories[i].poses))
                  for i in tracked}

        self.world = step_world(self.world, [actions[i] for i in active])
        for i in active:
            self.histories[i].push(self._scan(i))

        out = {}
        for i in tracked:
            prev, old_ranges, old_poses = before[i]
            cur = self.world.agents[i]
            clear = min_clearances(self.world, i, self.lidar.max_range)
            outcome = compute_reward(prev, cur, clear, self.reward_cfg)
            new = self.histories[i]
            tr = Transition(
                ranges=np.stack(old_ranges + [new.ranges[-1]]),
                poses=np.array([p.as_array() for p in old_poses + [new.poses[-1]]]),
                goal_rel=goal_relative(prev.pose, prev.goal), vel=prev.vel, action=actions[i],
                reward=outcome.reward, next_goal_rel=goal_relative(cur.pose, cur.goal), next_vel=cur.vel,
                done=outcome.done, kind=outcome.kind.value)
            out[i] = (outcome, clear, cur, tr)
        outcome, clear, cur, tr = out.pop(m)
        return EnvStep(outcome=outcome, clearances=clear, main_state=cur, transition=tr,
                       peer_transitions=[v[3] for _, v in sorted(out.items())])


# -- policies -------------------------------------------------------------------

def go_straight(obs: Observation, gain: float = 2.0) -> Action:
    """Full speed with proportional steering toward the goal; no avoidance."""
    return Action(V_MAX, min(max(gain * obs.goal_rel[1], W_MIN), W_MAX))


def random_policy(obs: Observation, rng: Optional[np.random.Generator] = None) -> Action:
    rng = np.random.default_rng() if rng is None else rng
    return Action(float(rng.uniform(0.0, V_MAX)), float(rng.uniform(W_MIN, W_MAX)))


class GoStraightPolicy:
    name = "go_straight"

    def __init__(self, gain: float = 2.0):
        self.gain = gain

    def act_observations(self, observations: Sequence[Observation], sigma: float = 0.0, rng=None):
        return [go_straight(o, self.gain) for o in observations]


class RandomPolicy:
    name = "random"

    def act_observations(self, observations: Sequence[Observation], sigma: float = 0.0, rng=None):
        if rng is None:
            raise ContractViolation("the random policy needs an rng")
        return [random_policy(o, rng) for o in observations]


SCRIPTED = {"go_straight": GoStraightPolicy, "random": RandomPolicy}


def act_all(env: NavEnv, policy, sigma: float = 0.0, rng=None) -> dict[int, Action]:
    """One action per active agent from the shared policy."""
    obs = env.observations()
    idx = list(obs)
    acts = policy.act_observations([obs[i] for i in idx], sigma, rng)
    return dict(zip(idx, acts))

