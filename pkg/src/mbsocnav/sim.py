"""Deterministic 2D world: unicycle kinematics, obstacle geometry, collision
queries, scenario generation and synchronous multi-agent stepping."""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError, ContractViolation, ScenarioError

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(theta, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def compose(self, other: "Pose2") -> "Pose2":
        """``self ∘ other``: ``other`` expressed in the frame of ``self``, moved to the outer frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(self.x + c * other.x - s * other.y,
                     self.y + s * other.x + c * other.y,
                     self.theta + other.theta)

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def transform_point(self, px: float, py: float) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.x + c * px - s * py, self.y + s * px + c * py

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def relative_pose(target: Pose2, source: Pose2) -> Pose2:
    """Pose of ``source`` expressed in the frame of ``target`` (``target⁻¹ ∘ source``)."""
    return target.inverse().compose(source)


V_MIN, V_MAX = 0.0, 1.0
W_MIN, W_MAX = -1.5, 1.5


@dataclass(frozen=True)
class Action:
    """Differential-drive command, clamped into bounds on construction."""
    v: float = 0.0
    w: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.w)):
            raise ContractViolation(f"non-finite action ({self.v}, {self.w})")
        object.__setattr__(self, "v", min(max(float(self.v), V_MIN), V_MAX))
        object.__setattr__(self, "w", min(max(float(self.w), W_MIN), W_MAX))


class AgentStatus(str, enum.Enum):
    ACTIVE = "active"
    ARRIVED = "arrived"
    COLLIDED = "collided"
    TIMED_OUT = "timed_out"


@dataclass(frozen=True)
class AgentState:
    pose: Pose2
    goal: tuple[float, float]
    vel: Action = Action()
    radius: float = 0.3
    status: AgentStatus = AgentStatus.ACTIVE

    def __post_init__(self):
        if not self.radius > 0:
            raise ContractViolation(f"agent radius must be positive, got {self.radius}")
        if not all(math.isfinite(g) for g in self.goal):
            raise ContractViolation(f"goal must be finite, got {self.goal}")

    @property
    def active(self) -> bool:
        return self.status is AgentStatus.ACTIVE

    def goal_distance(self) -> float:
        return math.hypot(self.goal[0] - self.pose.x, self.goal[1] - self.pose.y)


# -- obstacles ---------------------------------------------------------------

@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ContractViolation("circle radius must be positive")


@dataclass(frozen=True)
class Segment:
    a: tuple[float, float]
    b: tuple[float, float]

    def __post_init__(self):
        if tuple(self.a) == tuple(self.b):
            raise ContractViolation("segment endpoints must be distinct")


@dataclass(frozen=True)
class Rectangle:
    """Oriented box; ``extents`` are half-widths along the box's own axes."""
    center: tuple[float, float]
    extents: tuple[float, float]
    rotation: float = 0.0

    def __post_init__(self):
        if not (self.extents[0] > 0 and self.extents[1] > 0):
            raise ContractViolation("rectangle extents must be positive")

    def corners(self) -> list[tuple[float, float]]:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        hx, hy = self.extents
        out = []
        for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            lx, ly = sx * hx, sy * hy
            out.append((self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly))
        return out

    def edges(self) -> list[Segment]:
        cs = self.corners()
        return [Segment(cs[i], cs[(i + 1) % 4]) for i in range(4)]


Obstacle = Union[Circle, Segment, Rectangle]


def point_segment_distance(px, py, ax, ay, bx, by) -> float:
    sx, sy = bx - ax, by - ay
    t = ((px - ax) * sx + (py - ay) * sy) / (sx * sx + sy * sy)
    t = min(max(t, 0.0), 1.0)
    return math.hypot(px - (ax + t * sx), py - (ay + t * sy))


def surface_distance(px: float, py: float, shape: Obstacle) -> float:
    """Distance from a point to the shape's surface; 0 inside solid shapes."""
    if isinstance(shape, Circle):
        return max(math.hypot(px - shape.center[0], py - shape.center[1]) - shape.radius, 0.0)
    if isinstance(shape, Segment):
        return point_segment_distance(px, py, *shape.a, *shape.b)
    if isinstance(shape, Rectangle):
        c, s = math.cos(shape.rotation), math.sin(shape.rotation)
        dx, dy = px - shape.center[0], py - shape.center[1]
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        ex = max(abs(lx) - shape.extents[0], 0.0)
        ey = max(abs(ly) - shape.extents[1], 0.0)
        return math.hypot(ex, ey)
    raise TypeError(f"unknown obstacle {shape!r}")


def bounding_radius(shape: Obstacle) -> tuple[tuple[float, float], float]:
    if isinstance(shape, Circle):
        return tuple(shape.center), shape.radius
    if isinstance(shape, Segment):
        cx, cy = (shape.a[0] + shape.b[0]) / 2, (shape.a[1] + shape.b[1]) / 2
        return (cx, cy), math.hypot(shape.b[0] - shape.a[0], shape.b[1] - shape.a[1]) / 2
    return tuple(shape.center), math.hypot(*shape.extents)


def geometry_arrays(obstacles: Sequence[Obstacle]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten obstacles to ((k, 3) circles, (m, 4) segments) for the ray caster."""
    circles, segments = [], []
    for o in obstacles:
        if isinstance(o, Circle):
            circles.append((*o.center, o.radius))
        elif isinstance(o, Segment):
            segments.append((*o.a, *o.b))
        else:
            segments.extend((*e.a, *e.b) for e in o.edges())
    return (np.array(circles, dtype=np.float64).reshape(-1, 3),
            np.array(segments, dtype=np.float64).reshape(-1, 4))


def obstacle_to_dict(o: Obstacle) -> dict:
    if isinstance(o, Circle):
        return {"type": "circle", "center": list(o.center), "radius": o.radius}
    if isinstance(o, Segment):
        return {"type": "segment", "a": list(o.a), "b": list(o.b)}
    return {"type": "rectangle", "center": list(o.center), "extents": list(o.extents),
            "rotation": o.rotation}


# -- world -------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    timeout_ticks: int = 600
    goal_tolerance: float = 0.3
    agent_radius: float = 0.3

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.timeout_ticks < 1:
            raise ConfigurationError("timeout_ticks must be >= 1")


@dataclass(frozen=True)
class WorldState:
    agents: tuple[AgentState, ...]
    obstacles: tuple[Obstacle, ...] = ()
    tick: int = 0
    dt: float = 0.1
    main_index: int = 0
    goal_tolerance: float = 0.3
    timeout_ticks: int = 600

    def __post_init__(self):
        if not self.agents:
            raise ContractViolation("world needs at least one agent")
        if not self.dt > 0 or self.tick < 0:
            raise ContractViolation("dt must be positive and tick non-negative")
        if not 0 <= self.main_index < len(self.agents):
            raise ContractViolation("main_index out of range")

    @property
    def main_agent(self) -> AgentState:
        return self.agents[self.main_index]

    def active_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.agents) if a.active]

    def ray_geometry(self, exclude: int) -> tuple[np.ndarray, np.ndarray]:
        circles, segments = geometry_arrays(self.obstacles)
        bodies = [(a.pose.x, a.pose.y, a.radius) for j, a in enumerate(self.agents) if j != exclude]
        if bodies:
            circles = np.vstack([circles, np.array(bodies, dtype=np.float64)])
        return circles, segments


def step_agent(pose: Pose2, action: Action, dt: float) -> Pose2:
    """Exact arc integration of unicycle kinematics over ``dt``."""
    v, w = action.v, action.w
    th = pose.theta
    if abs(w) < 1e-9:
        return Pose2(pose.x + v * dt * math.cos(th), pose.y + v * dt * math.sin(th), th)
    th2 = th + w * dt
    return Pose2(pose.x + (v / w) * (math.sin(th2) - math.sin(th)),
                 pose.y - (v / w) * (math.cos(th2) - math.cos(th)),
                 th2)


def ego_motion(action: Action, dt: float) -> Pose2:
    """Post-step robot pose expressed in the pre-step robot frame."""
    return step_agent(Pose2(), action, dt)


def _raw_clearances(world: WorldState, index: int) -> tuple[float, float]:
    me = world.agents[index]
    px, py = me.pose.x, me.pose.y
    d_obs = min((surface_distance(px, py, o) for o in world.obstacles), default=math.inf)
    d_ped = math.inf
    for j, other in enumerate(world.agents):
        if j == index:
            continue
        d_ped = min(d_ped, math.hypot(px - other.pose.x, py - other.pose.y) - other.radius)
    return min(d_obs, d_ped), d_ped


def min_clearances(world: WorldState, agent_index: int, max_range: float = 6.0) -> tuple[float, float]:
    """Ground-truth clearances from the agent's center.

    ``d`` is the nearest surface of any obstacle or other agent, capped at
    ``max_range`` (the laser sentinel). ``d_ped`` only considers other agents
    and is ``inf`` when none is within ``max_range``.
    """
    d, d_ped = _raw_clearances(world, agent_index)
    d = min(max(d, 0.0), max_range)
    d_ped = max(d_ped, 0.0)
    if d_ped > max_range:
        d_ped = math.inf
    return d, d_ped


def step_world(world: WorldState, actions: Sequence[Action]) -> WorldState:
    """Advance every active agent simultaneously, then update statuses.

    ``actions`` holds one entry per active agent, in agent order. Agents that
    arrived, collided or timed out stay frozen in place.
    """
    active = world.active_indices()
    if len(actions) != len(active):
        raise ConfigurationError(
            f"expected {len(active)} actions (one per active agent), got {len(actions)}")
    agents = list(world.agents)
    for i, a in zip(active, actions):
        agents[i] = dataclasses.replace(agents[i], pose=step_agent(agents[i].pose, a, world.dt), vel=a)
    moved = dataclasses.replace(world, agents=tuple(agents), tick=world.tick + 1)

    agents = list(moved.agents)
    for i in active:
        ag = agents[i]
        d, _ = _raw_clearances(moved, i)
        if d < ag.radius:
            status = AgentStatus.COLLIDED
        elif ag.goal_distance() <= world.goal_tolerance:
            status = AgentStatus.ARRIVED
        elif moved.tick >= world.timeout_ticks:
            status = AgentStatus.TIMED_OUT
        else:
            continue
        agents[i] = dataclasses.replace(ag, status=status)
    return dataclasses.replace(moved, agents=tuple(agents))


# -- scenarios ---------------------------------------------------------------

SCENARIO_KINDS = ("passing", "towards", "crossing", "random", "static_mapless")
MIN_AGENT_CLEARANCE = 1.0
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class Scenario:
    kind: str = "random"
    seed: int = 0
    n_agents: int = 4
    bounds: float = 10.0
    obstacle_density: float = 0.05

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be >= 1")
        if not self.bounds > 0:
            raise ConfigurationError("bounds must be positive")
        if self.obstacle_density < 0:
            raise ConfigurationError("obstacle_density must be non-negative")

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=int(seed))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        fields = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - fields
        if extra:
            raise ConfigurationError(f"unknown scenario fields {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


class _Placer:
    """Rejection sampler that keeps placed discs pairwise separated."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.discs: list[tuple[float, float, float]] = []

    def free(self, x, y, r, gap) -> bool:
        return all(math.hypot(x - a, y - b) >= r + rb + gap for a, b, rb in self.discs)

    def sample(self, lo, hi, r, gap, extra=None):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = self.rng.uniform(lo, hi, size=2)
            if self.free(x, y, r, gap) and (extra is None or extra(x, y)):
                return float(x), float(y)
        raise ScenarioError(f"could not place entity after {MAX_PLACEMENT_ATTEMPTS} attempts")


def _random_obstacle(rng: np.random.Generator, x: float, y: float) -> Obstacle:
    kind = rng.integers(3)
    if kind == 0:
        return Circle((x, y), float(rng.uniform(0.2, 0.5)))
    if kind == 1:
        return Rectangle((x, y), (float(rng.uniform(0.15, 0.5)), float(rng.uniform(0.15, 0.5))),
                         float(rng.uniform(-math.pi, math.pi)))
    half = float(rng.uniform(0.3, 0.8))
    ang = float(rng.uniform(-math.pi, math.pi))
    return Segment((x - half * math.cos(ang), y - half * math.sin(ang)),
                   (x + half * math.cos(ang), y + half * math.sin(ang)))


def _place_obstacles(rng, placer: _Placer, count: int, half: float, keep_clear) -> list[Obstacle]:
    obstacles = []
    for _ in range(count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = (float(v) for v in rng.uniform(-half, half, size=2))
            ob = _random_obstacle(rng, x, y)
            (cx, cy), br = bounding_radius(ob)
            if placer.free(cx, cy, br, 0.3) and keep_clear(cx, cy, br):
                placer.discs.append((cx, cy, br))
                obstacles.append(ob)
                break
        else:
            raise ScenarioError(f"could not place obstacle after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return obstacles


def _heading_to(start, goal, rng, jitter=0.5) -> float:
    return math.atan2(goal[1] - start[1], goal[0] - start[0]) + float(rng.uniform(-jitter, jitter))


def generate_scenario(spec: Scenario, sim: SimConfig = SimConfig()) -> WorldState:
    """Build the initial world for a scenario; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    r = sim.agent_radius
    half = spec.bounds / 2.0
    starts: list[tuple[float, float]] = []
    goals: list[tuple[float, float]] = []
    obstacles: list[Obstacle] = []
    n = spec.n_agents
    min_sep = 2 * r + MIN_AGENT_CLEARANCE

    if spec.kind == "towards":
        radius = half - r - 0.2
        if radius <= 0 or (n > 1 and 2 * radius * math.sin(math.pi / n) < min_sep):
            raise ScenarioError("bounds too small for the towards circle")
        needed = 2 * math.asin(min(1.0, min_sep / (2 * radius))) if n > 1 else 0.0
        max_jit = (TWO_PI / n - needed) / 2 if n > 1 else math.pi
        base = float(rng.uniform(-math.pi, math.pi))
        for i in range(n):
            phi = base + TWO_PI * i / n + float(rng.uniform(-0.9, 0.9)) * max_jit
            s = (radius * math.cos(phi), radius * math.sin(phi))
            starts.append(s)
            goals.append((-s[0], -s[1]))
    elif spec.kind == "passing":
        lane = min_sep + 0.2
        length = spec.bounds - 2 * (r + 0.2)
        y0 = -lane * (n - 1) / 2
        if lane * (n - 1) > spec.bounds:
            raise ScenarioError("bounds too small for the passing lanes")
        flip = 1.0 if rng.uniform() < 0.5 else -1.0
        for i in range(n):
            y = y0 + lane * i + float(rng.uniform(-0.1, 0.1))
            x = -length / 2 + float(rng.uniform(0.0, 0.5))
            offset = (lane / 2) * (1 if i % 2 == 0 else -1) * flip
            starts.append((x, y))
            goals.append((length / 2 - float(rng.uniform(0.0, 0.5)), y + offset))
        rot = float(rng.uniform(-math.pi, math.pi))
        c, s = math.cos(rot), math.sin(rot)
        starts = [(c * x - s * y, s * x + c * y) for x, y in starts]
        goals = [(c * x - s * y, s * x + c * y) for x, y in goals]
    elif spec.kind == "crossing":
        reach = half - r - 0.2
        lane = min_sep + 0.2
        n_x = (n + 1) // 2
        n_y = n - n_x
        if lane * (max(n_x, n_y) - 1) / 2 + min_sep > reach:
            raise ScenarioError("bounds too small for crossing lanes")
        for k in range(n_x):
            off = (k - (n_x - 1) / 2) * lane
            starts.append((-reach + float(rng.uniform(0.0, 0.4)), off))
            goals.append((reach, off))
        for k in range(n_y):
            off = (k - (n_y - 1) / 2) * lane
            starts.append((off, -reach + float(rng.uniform(0.0, 0.4))))
            goals.append((off, reach))
        rot = float(rng.uniform(-math.pi, math.pi))
        c, s = math.cos(rot), math.sin(rot)
        starts = [(c * x - s * y, s * x + c * y) for x, y in starts]
        goals = [(c * x - s * y, s * x + c * y) for x, y in goals]
    elif spec.kind == "random":
        placer = _Placer(rng)
        lim = half - r - 0.2
        min_travel = spec.bounds / 3.0
        for _ in range(n):
            s = placer.sample(-lim, lim, r, MIN_AGENT_CLEARANCE)
            placer.discs.append((*s, r))
            g = placer.sample(-lim, lim, r, 0.4,
                              extra=lambda x, y, s=s: math.hypot(x - s[0], y - s[1]) >= min_travel)
            placer.discs.append((*g, r))
            starts.append(s)
            goals.append(g)
        count = int(round(spec.obstacle_density * spec.bounds ** 2))
        obstacles = _place_obstacles(rng, placer, count, half, lambda *_: True)
    elif spec.kind == "static_mapless":
        n = 1
        placer = _Placer(rng)
        lim = half - r - 0.2
        ang = float(rng.uniform(-math.pi, math.pi))
        dist = float(rng.uniform(0.6, 0.9)) * 2 * lim
        s = (-0.5 * dist * math.cos(ang), -0.5 * dist * math.sin(ang))
        g = (0.5 * dist * math.cos(ang), 0.5 * dist * math.sin(ang))
        placer.discs += [(*s, r + 0.5), (*g, r + 0.2)]
        starts.append(s)
        goals.append(g)
        count = int(round(spec.obstacle_density * spec.bounds ** 2))
        obstacles = _place_obstacles(rng, placer, count, half, lambda *_: True)

    agents = tuple(
        AgentState(pose=Pose2(s[0], s[1], _heading_to(s, g, rng)), goal=(float(g[0]), float(g[1])),
                   radius=r)
        for s, g in zip(starts, goals)
    )
    return WorldState(agents=agents, obstacles=tuple(obstacles), tick=0, dt=sim.dt, main_index=0,
                      goal_tolerance=sim.goal_tolerance, timeout_ticks=sim.timeout_ticks)


def world_to_dict(world: WorldState) -> dict:
    return {
        "tick": world.tick,
        "dt": world.dt,
        "main_index": world.main_index,
        "agents": [
            {"pose": [a.pose.x, a.pose.y, a.pose.theta], "goal": list(a.goal),
             "vel": [a.vel.v, a.vel.w], "radius": a.radius, "status": a.status.value}
            for a in world.agents
        ],
        "obstacles": [obstacle_to_dict(o) for o in world.obstacles],
    }
