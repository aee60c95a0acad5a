"""Local obstacle maps built from laser scans, aligned by odometry.

Grid convention: the robot sits at the middle of the bottom edge
(row ``height - 1``, column ``width // 2``), forward points up (decreasing
row) and the robot's left is decreasing column.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .diffcore import bilinear_warp, warp_coordinates
from .errors import ContractViolation
from .lidar import LaserScan
from .sim import Action, Pose2, W_MAX, W_MIN, V_MAX, ego_motion, wrap_angle

STACK_LEN = 10


@dataclass(frozen=True)
class GridConfig:
    width: int = 64
    height: int = 64
    resolution: float = 0.1

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or not self.resolution > 0:
            raise ContractViolation("grid dimensions and resolution must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of a point in robot coordinates; may be out of bounds."""
        return (self.height - 1 - math.floor(x / self.resolution + 0.5),
                self.width // 2 - math.floor(y / self.resolution + 0.5))


@dataclass(frozen=True)
class Observation:
    """``maps`` is the (K, H, W) stack o_l; ``goal_rel`` is (distance, bearing)."""
    maps: np.ndarray
    goal_rel: tuple[float, float]
    vel: Action

    def __post_init__(self):
        if self.goal_rel[0] < 0:
            raise ContractViolation("goal distance must be non-negative")


@dataclass(frozen=True)
class Norms:
    d_max: float = 10.0


def rasterize_scan(scan: LaserScan, rel: Pose2, cfg: GridConfig = GridConfig()) -> np.ndarray:
    """Occupancy grid of the scan's hit points expressed in the target frame."""
    return kernels.rasterize(scan.ranges, scan.config.beam_angles(), scan.config.max_range,
                             rel.x, rel.y, rel.theta, cfg.height, cfg.width, cfg.resolution)


def relative_pose_array(poses: np.ndarray) -> np.ndarray:
    """(..., K, 3) world poses re-expressed in the frame of the last row of each window."""
    p = np.asarray(poses, dtype=np.float64)
    last = p[..., -1:, :]
    c, s = np.cos(last[..., 2]), np.sin(last[..., 2])
    dx, dy, dt = p[..., 0] - last[..., 0], p[..., 1] - last[..., 1], p[..., 2] - last[..., 2]
    out = np.stack([c * dx + s * dy, -s * dx + c * dy, np.arctan2(np.sin(dt), np.cos(dt))], axis=-1)
    out[..., -1, :] = 0.0
    return out


def relative_poses(poses: Sequence[Pose2]) -> np.ndarray:
    """Every pose expressed in the frame of the last one, as a (K, 3) array."""
    return relative_pose_array(np.array([p.as_array() for p in poses]))


def stack_from_ranges(ranges: np.ndarray, rel_poses: np.ndarray, beam_angles: np.ndarray,
                      max_range: float, cfg: GridConfig = GridConfig()) -> np.ndarray:
    return kernels.rasterize_stack(ranges, beam_angles, max_range, rel_poses,
                                   cfg.height, cfg.width, cfg.resolution)


def build_stack(scans: Sequence[LaserScan], poses: Sequence[Pose2],
                cfg: GridConfig = GridConfig()) -> np.ndarray:
    """Rasterize the last ten scans into the frame of the newest pose, oldest first."""
    if len(scans) != STACK_LEN or len(poses) != STACK_LEN:
        raise ContractViolation(f"build_stack needs {STACK_LEN} scans and poses, got "
                                f"{len(scans)} and {len(poses)}")
    lid = scans[0].config
    ranges = np.stack([s.ranges for s in scans])
    return stack_from_ranges(ranges, relative_poses(poses), lid.beam_angles(), lid.max_range, cfg)


def motion_content_split(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    stack = np.asarray(stack)
    if stack.shape[0] != STACK_LEN:
        raise ContractViolation(f"stack must hold {STACK_LEN} frames, got {stack.shape[0]}")
    return stack[1:] - stack[:-1], stack[-1]


def affine_warp(grid: np.ndarray, ego: Pose2, cfg: GridConfig = GridConfig()) -> np.ndarray:
    """Re-express a grid after the robot moved by ``ego`` (new pose in the old frame).

    Inverse-mapped bilinear sampling; anything outside the old grid reads free.
    Shares its implementation with :func:`mbsocnav.diffcore.bilinear_warp`.
    """
    grid = np.asarray(grid)
    rows, cols = warp_coordinates(ego.as_array()[None], cfg.height, cfg.width, cfg.resolution)
    img = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float64))[None, None]
    out = bilinear_warp(img, torch.from_numpy(rows), torch.from_numpy(cols))
    return out[0, 0].numpy().astype(grid.dtype, copy=False)


def action_ego_motion(action: Action, dt: float) -> Pose2:
    return ego_motion(action, dt)


def goal_relative(pose: Pose2, goal) -> tuple[float, float]:
    dx, dy = goal[0] - pose.x, goal[1] - pose.y
    return math.hypot(dx, dy), wrap_angle(math.atan2(dy, dx) - pose.theta)


def propagate_proprioception(goal_rel, vel: Action, action: Action, dt: float):
    """Goal and velocity after executing ``action`` for ``dt``, from kinematics alone."""
    dist, bearing = goal_rel
    gx, gy = dist * math.cos(bearing), dist * math.sin(bearing)
    nx, ny = ego_motion(action, dt).inverse().transform_point(gx, gy)
    return (math.hypot(nx, ny), wrap_angle(math.atan2(ny, nx))), action


def normalize_vector(goal_rel, vel: Action, norms: Norms = Norms()) -> np.ndarray:
    dist, bearing = goal_rel
    return np.array([
        min(max(dist / norms.d_max, 0.0), 1.0),
        (bearing + math.pi) / (2 * math.pi),
        vel.v / V_MAX,
        (vel.w - W_MIN) / (W_MAX - W_MIN),
    ], dtype=np.float32)


def denormalize_vector(vec, norms: Norms = Norms()):
    """Inverse of :func:`normalize_vector` on its clamped domain."""
    dist = float(vec[0]) * norms.d_max
    bearing = float(vec[1]) * 2 * math.pi - math.pi
    return (dist, bearing), Action(float(vec[2]) * V_MAX, float(vec[3]) * (W_MAX - W_MIN) + W_MIN)


def normalize_observation(obs: Observation, norms: Norms = Norms()) -> tuple[np.ndarray, np.ndarray]:
    """(maps in [0, 1], normalized [distance, bearing, v, w])."""
    return np.asarray(obs.maps, dtype=np.float32), normalize_vector(obs.goal_rel, obs.vel, norms)


def normalize_action(a: Action) -> np.ndarray:
    return np.array([a.v / V_MAX, (a.w - W_MIN) / (W_MAX - W_MIN)], dtype=np.float32)


def actions_to_physical(a_norm) -> np.ndarray:
    """(B, 2) normalized actions to physical (v, w)."""
    a = np.asarray(a_norm, dtype=np.float64).reshape(-1, 2)
    return np.stack([a[:, 0] * V_MAX, W_MIN + a[:, 1] * (W_MAX - W_MIN)], axis=1)


def denormalize_action(a) -> Action:
    return Action(float(a[0]) * V_MAX, float(a[1]) * (W_MAX - W_MIN) + W_MIN)


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM, 0 = free and 255 = occupied."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    img = np.rint(g * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ContractViolation(f"{path} is not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1: pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


class ScanHistory:
    """Rolling window of the last ten scans and odometry poses of one agent."""

    def __init__(self, first: LaserScan):
        self.ranges = [first.ranges] * STACK_LEN
        self.poses = [first.pose_at_scan] * STACK_LEN
        self.config = first.config

    def push(self, s: LaserScan):
        self.ranges = self.ranges[1:] + [s.ranges]
        self.poses = self.poses[1:] + [s.pose_at_scan]

    def window(self) -> tuple[np.ndarray, np.ndarray]:
        """(K, n_beams) ranges and (K, 3) poses relative to the newest."""
        return np.stack(self.ranges), relative_poses(self.poses)

    def stack(self, cfg: GridConfig = GridConfig()) -> np.ndarray:
        ranges, rel = self.window()
        return stack_from_ranges(ranges, rel, self.config.beam_angles(), self.config.max_range, cfg)
