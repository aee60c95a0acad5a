"""Scenario-suite evaluation: success rate, arriving time, ego and social scores."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .env import NavEnv, act_all
from .errors import ConfigurationError, ContractViolation
from .lidar import LidarConfig
from .obsmap import GridConfig
from .reward import RewardConfig
from .sim import Scenario, SimConfig


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 20
    seed_base: int = 1_000_000_000
    comfort_margin: float = 0.45
    # evaluation during training
    train_episodes: int = 5
    train_every: int = 500

    def __post_init__(self):
        if self.episodes < 1 or self.train_episodes < 1 or self.train_every < 1:
            raise ConfigurationError("evaluation counts must be >= 1")
        if self.comfort_margin < 0:
            raise ConfigurationError("comfort_margin must be non-negative")


@dataclass(frozen=True)
class TickRecord:
    tick: int
    x: float
    y: float
    theta: float
    v: float
    w: float
    d: float
    d_ped: float
    reward: float


TRACE_HEADER = [f.name for f in fields(TickRecord)]


@dataclass
class EpisodeTrace:
    records: list
    kind: str
    dt: float
    seed: int = 0

    def __post_init__(self):
        if not self.records:
            raise ContractViolation("an episode trace needs at least one tick")

    @property
    def ticks(self) -> int:
        return len(self.records)

    @property
    def duration(self) -> float:
        return self.ticks * self.dt

    @property
    def ret(self) -> float:
        return float(sum(r.reward for r in self.records))

    @property
    def success(self) -> bool:
        return self.kind == "arrived"

    def to_csv(self, path) -> None:
        """Header comment line with kind/dt/seed, then one row per tick."""
        with open(path, "w", newline="") as fh:
            fh.write(f"# kind={self.kind} dt={self.dt!r} seed={self.seed}\n")
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([repr(getattr(r, k)) for k in TRACE_HEADER])

    @classmethod
    def from_csv(cls, path) -> "EpisodeTrace":
        with open(path, newline="") as fh:
            meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
            rows = list(csv.DictReader(fh))
        recs = [TickRecord(int(r["tick"]), *(float(r[k]) for k in TRACE_HEADER[1:])) for r in rows]
        return cls(recs, meta["kind"], float(meta["dt"]), int(meta["seed"]))


def ego_score(trace: EpisodeTrace, safety_radius: float = 0.3) -> float:
    """Percentage of ticks whose clearance to everything exceeds the safety radius."""
    m = sum(1 for r in trace.records if r.d > safety_radius)
    return 100.0 * m / trace.ticks


def social_score(trace: EpisodeTrace, safety_radius: float = 0.3, comfort_margin: float = 0.45) -> float:
    """Percentage of ticks keeping the comfort distance to other agents."""
    n = sum(1 for r in trace.records if r.d_ped > safety_radius + comfort_margin)
    return 100.0 * n / trace.ticks


@dataclass(frozen=True)
class MetricsReport:
    policy: str
    scenario: str
    success_rate: float
    arriving_time: Optional[float]
    ego_score: float
    social_score: float
    episodes: int

    def __post_init__(self):
        for v in (self.success_rate, self.ego_score, self.social_score):
            if not 0.0 <= v <= 100.0:
                raise ContractViolation(f"score {v} outside [0, 100]")


def metrics_from_traces(traces: Sequence[EpisodeTrace], policy: str, scenario: str,
                        safety_radius: float = 0.3, comfort_margin: float = 0.45) -> MetricsReport:
    if not traces:
        raise ContractViolation("no traces to score")
    wins = [t for t in traces if t.success]
    return MetricsReport(
        policy=policy, scenario=scenario,
        success_rate=100.0 * len(wins) / len(traces),
        arriving_time=float(np.mean([t.duration for t in wins])) if wins else None,
        ego_score=float(np.mean([ego_score(t, safety_radius) for t in traces])),
        social_score=float(np.mean([social_score(t, safety_radius, comfort_margin) for t in traces])),
        episodes=len(traces),
    )


def run_episode(env: NavEnv, policy, seed: int, rng: Optional[np.random.Generator] = None,
                sigma: float = 0.0) -> EpisodeTrace:
    env.reset(seed=seed)
    records = []
    while not env.main_done:
        st = env.step(act_all(env, policy, sigma, rng))
        p, a = st.main_state.pose, st.transition.action
        records.append(TickRecord(env.world.tick, p.x, p.y, p.theta, a.v, a.w,
                                  st.clearances[0], st.clearances[1], st.outcome.reward))
    return EpisodeTrace(records, st.outcome.kind.value, env.sim.dt, seed)


def evaluate(policy, scenario: Scenario, episodes: int = 20, seed_base: int = 0,
             sim: SimConfig = SimConfig(), lidar: LidarConfig = LidarConfig(),
             grid: GridConfig = GridConfig(), reward: RewardConfig = RewardConfig(),
             comfort_margin: float = 0.45, name: Optional[str] = None,
             dump_dir=None) -> tuple[MetricsReport, list[EpisodeTrace]]:
    """Run ``episodes`` seeded episodes (seeds ``seed_base + k``) and score them.

    Per-episode randomness (only the random policy uses any) comes from a
    generator seeded with the episode seed, so episodes are independent.
    """
    env = NavEnv(scenario, sim, lidar, grid, reward)
    traces = []
    for k in range(episodes):
        seed = seed_base + k
        traces.append(run_episode(env, policy, seed, np.random.default_rng(seed)))
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
        for k, t in enumerate(traces):
            t.to_csv(os.path.join(dump_dir, f"episode_{k:03d}.csv"))
    name = name or getattr(policy, "name", type(policy).__name__)
    return metrics_from_traces(traces, name, scenario.kind, reward.r, comfort_margin), traces


# -- export -------------------------------------------------------------------

REPORT_COLUMNS = ["policy", "scenario", "success_rate", "arriving_time", "ego_score",
                  "social_score", "episodes"]
TABLE_HEADERS = ["Policy", "Scenario", "Success Rate", "Arriving Time", "Ego Score",
                 "Social Score", "Episodes"]
UNDEFINED = "n/a"


def export_report(reports: Sequence[MetricsReport]) -> tuple[str, str]:
    """CSV text (full precision) and an aligned text table rounded for reading."""
    if not reports:
        raise ContractViolation("export_report needs at least one report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    rows = []
    for r in reports:
        d = asdict(r)
        w.writerow([UNDEFINED if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c])
                    for c in REPORT_COLUMNS])
        rows.append([r.policy, r.scenario, f"{r.success_rate:.0f} %",
                     UNDEFINED if r.arriving_time is None else f"{r.arriving_time:.1f} s",
                     f"{r.ego_score:.0f} %", f"{r.social_score:.0f} %", str(r.episodes)])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(TABLE_HEADERS)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(TABLE_HEADERS)).rstrip(),
             "  ".join("-" * n for n in widths)]
    lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip() for row in rows]
    return buf.getvalue(), "\n".join(lines) + "\n"


def parse_report(text: str) -> list[MetricsReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        at = row["arriving_time"]
        out.append(MetricsReport(
            policy=row["policy"], scenario=row["scenario"],
            success_rate=float(row["success_rate"]),
            arriving_time=None if at == UNDEFINED else float(at),
            ego_score=float(row["ego_score"]), social_score=float(row["social_score"]),
            episodes=int(row["episodes"])))
    return out


def mean_return(traces: Sequence[EpisodeTrace]) -> float:
    return float(np.mean([t.ret for t in traces]))
