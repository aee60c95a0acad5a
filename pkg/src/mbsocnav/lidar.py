"""Simulated 2D laser rangefinder (analytic ray casting)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .sim import Obstacle, Pose2, WorldState, geometry_arrays


@dataclass(frozen=True)
class LidarConfig:
    n_beams: int = 180
    fov: float = math.pi
    max_range: float = 6.0
    min_range: float = 0.05
    noise_std: float = 0.0

    def __post_init__(self):
        if self.n_beams < 2:
            raise ConfigurationError("n_beams must be >= 2")
        if not 0 < self.fov <= 2 * math.pi:
            raise ConfigurationError("fov must be in (0, 2pi]")
        if not 0 <= self.min_range < self.max_range:
            raise ConfigurationError("need 0 <= min_range < max_range")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")

    def beam_angles(self) -> np.ndarray:
        """Beam directions relative to the sensor heading."""
        return -self.fov / 2 + np.arange(self.n_beams) * (self.fov / (self.n_beams - 1))


@dataclass(frozen=True)
class LaserScan:
    ranges: np.ndarray
    config: LidarConfig
    pose_at_scan: Pose2


def intersect_ray(origin, direction, shape: Obstacle) -> Optional[float]:
    """Smallest non-negative ``t`` where ``origin + t * direction`` meets the shape boundary."""
    circles, segments = geometry_arrays([shape])
    angle = math.atan2(direction[1], direction[0])
    t = kernels.cast_rays(float(origin[0]), float(origin[1]), np.array([angle]), circles, segments)[0]
    return None if math.isinf(t) else float(t)


def scan(world: WorldState, agent_index: int, cfg: LidarConfig = LidarConfig(),
         rng: Optional[np.random.Generator] = None) -> LaserScan:
    """Range array seen by one agent; its own body is excluded, frozen agents are not."""
    pose = world.agents[agent_index].pose
    circles, segments = world.ray_geometry(exclude=agent_index)
    t = kernels.cast_rays(pose.x, pose.y, pose.theta + cfg.beam_angles(), circles, segments)
    if cfg.noise_std > 0 and rng is not None:
        hit = np.isfinite(t)
        t = np.where(hit, t + rng.normal(0.0, cfg.noise_std, size=t.shape), t)
    ranges = np.clip(np.where(np.isfinite(t), t, cfg.max_range), cfg.min_range, cfg.max_range)
    return LaserScan(ranges=ranges, config=cfg, pose_at_scan=pose)


def dump_scans_csv(path, scans: Iterable[LaserScan]) -> None:
    """One row per scan: pose followed by the range array."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header_written = False
        for s in scans:
            if not header_written:
                w.writerow(["x", "y", "theta"] + [f"r{i}" for i in range(len(s.ranges))])
                header_written = True
            w.writerow([repr(s.pose_at_scan.x), repr(s.pose_at_scan.y), repr(s.pose_at_scan.theta)]
                       + [repr(float(r)) for r in s.ranges])
