"""Learned transition model: next obstacle map and reward from the map stack,
goal/velocity and action; trained on real data, used as a bootstrap ensemble
for short virtual rollouts."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import diffcore as dc
from .errors import ContractViolation, TrainingError
from .obsmap import (STACK_LEN, GridConfig, Norms, Observation, actions_to_physical, normalize_action,
                     normalize_vector)
from .sim import Action, V_MAX, W_MAX, W_MIN, ego_motion

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    enc1_channels: int = 8
    enc1_kernel: int = 8
    enc1_stride: int = 4
    enc2_channels: int = 16
    enc2_kernel: int = 4
    enc2_stride: int = 2
    hidden_channels: int = 16
    embed_dim: int = 16
    fused_channels: int = 32
    dec1_channels: int = 16
    dec2_channels: int = 8
    reward_hidden: int = 64
    lambda_r: float = 0.01
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 300
    ensemble_size: int = 5
    terminal_fraction: float = 0.8
    # output layer starts as a soft copy of the last frame (logit = gain * (last - 0.5))
    copy_gain: float = 8.0


def _pad(kernel: int, stride: int) -> int:
    return (kernel - stride) // 2


class TransitionModel(nn.Module):
    """Motion/content encoders, fused decoder, ego-motion warp and reward head."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), grid: GridConfig = GridConfig(),
                 dt: float = 0.1, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.cfg, self.grid, self.dt = cfg, grid, dt
        c1, c2, hc = cfg.enc1_channels, cfg.enc2_channels, cfg.hidden_channels
        k1, s1, k2, s2 = cfg.enc1_kernel, cfg.enc1_stride, cfg.enc2_kernel, cfg.enc2_stride
        self.motion1 = dc.Conv2d(1, c1, k1, s1, _pad(k1, s1), generator=g)
        self.motion2 = dc.Conv2d(c1, c2, k2, s2, _pad(k2, s2), generator=g)
        self.motion_rnn = dc.ConvLSTMCell(c2, hc, 3, generator=g)
        self.content1 = dc.Conv2d(1, c1, k1, s1, _pad(k1, s1), generator=g)
        self.content2 = dc.Conv2d(c1, c2, k2, s2, _pad(k2, s2), generator=g)
        self.embed1 = dc.Dense(6, 32, generator=g)
        self.embed2 = dc.Dense(32, cfg.embed_dim, generator=g)
        self.fuse = dc.Conv2d(hc + c2 + cfg.embed_dim, cfg.fused_channels, 3, 1, 1, generator=g)
        self.dec1 = dc.Deconv2d(cfg.fused_channels, cfg.dec1_channels, k2, s2, _pad(k2, s2), generator=g)
        self.dec2 = dc.Deconv2d(cfg.dec1_channels, cfg.dec2_channels, k1, s1, _pad(k1, s1), generator=g)
        # full-resolution head sees the decoded features plus the last frame and last difference
        self.out = dc.Conv2d(cfg.dec2_channels + 2, 1, 3, 1, 1, generator=g)
        with torch.no_grad():
            self.out.weight[0, cfg.dec2_channels, 1, 1] += cfg.copy_gain
            self.out.bias.fill_(-0.5 * cfg.copy_gain)
        self.reward_conv = dc.Conv2d(cfg.fused_channels, 16, 3, 2, 1, generator=g)
        lat = grid.height // (s1 * s2)
        n_flat = 16 * math.ceil(lat / 2) * math.ceil((grid.width // (s1 * s2)) / 2)
        self.reward1 = dc.Dense(n_flat + cfg.embed_dim, cfg.reward_hidden, generator=g)
        self.reward2 = dc.Dense(cfg.reward_hidden, 1, generator=g)

    def params(self) -> dc.ParamSet:
        return dc.ParamSet.from_module(self)

    # -- pieces -----------------------------------------------------------------
    def encode_motion(self, maps):
        b = maps.shape[0]
        diffs = maps[:, 1:] - maps[:, :-1]
        k = diffs.shape[1]
        feats = dc.relu(self.motion2(dc.relu(self.motion1(diffs.reshape(b * k, 1, *maps.shape[2:])))))
        feats = feats.reshape(b, k, *feats.shape[1:])
        state = None
        for t in range(k):
            state = self.motion_rnn(feats[:, t], state)
        return state[0]

    def encode_content(self, maps):
        return dc.relu(self.content2(dc.relu(self.content1(maps[:, -1:]))))

    def embed(self, vec, act):
        return self.embed2(dc.relu(self.embed1(dc.concat([vec, act], dim=1))))

    def decode(self, fused, maps):
        """Next map in the pre-motion frame, values in (0, 1)."""
        x = dc.relu(self.dec1(fused))
        x = dc.relu(self.dec2(x))
        last = maps[:, -1:]
        x = dc.concat([x, last, last - maps[:, -2:-1]], dim=1)
        return dc.sigmoid(self.out(x))

    def reward_head(self, fused, emb):
        z = dc.relu(self.reward_conv(fused)).flatten(1)
        z = dc.relu(self.reward1(dc.concat([z, emb], dim=1)))
        return self.reward2(z).squeeze(1)

    def forward(self, maps, vec, act, ego):
        """``maps`` (B, K, H, W), ``vec`` (B, 4), ``act`` (B, 2) normalized; ``ego`` (B, 3) poses.

        Returns the warped next map (B, H, W) and the predicted reward (B,).
        """
        if maps.dim() != 4 or maps.shape[1] != STACK_LEN or tuple(maps.shape[2:]) != self.grid.shape:
            raise ContractViolation(f"model input maps have shape {tuple(maps.shape)}, expected "
                                    f"(B, {STACK_LEN}, {self.grid.height}, {self.grid.width})")
        if vec.shape != (maps.shape[0], 4) or act.shape != (maps.shape[0], 2):
            raise ContractViolation(f"vector shapes {tuple(vec.shape)} / {tuple(act.shape)} do not match batch")
        emb = self.embed(vec, act)
        h = self.encode_motion(maps)
        content = self.encode_content(maps)
        tiled = emb[:, :, None, None].expand(-1, -1, *h.shape[2:])
        fused = dc.relu(self.fuse(dc.concat([h, content, tiled], dim=1)))
        pre = self.decode(fused, maps)
        rows, cols = dc.warp_coordinates(ego, self.grid.height, self.grid.width, self.grid.resolution)
        nxt = dc.bilinear_warp(pre, torch.from_numpy(rows), torch.from_numpy(cols))
        return nxt[:, 0], self.reward_head(fused, emb)


def _tensor(a, dtype):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def predict(model: TransitionModel, obs: Observation, action: Action,
            norms: Norms = Norms()) -> tuple[np.ndarray, float]:
    """Next obstacle map and reward for a single observation and action."""
    dtype = next(model.parameters()).dtype
    maps = _tensor(obs.maps[None], dtype)
    vec = _tensor(normalize_vector(obs.goal_rel, obs.vel, norms)[None], dtype)
    act = _tensor(normalize_action(action)[None], dtype)
    ego = ego_motion(action, model.dt).as_array()[None]
    with torch.no_grad():
        nxt, r = model(maps, vec, act, ego)
    return nxt[0].numpy(), float(r[0])


def model_loss(model: TransitionModel, batch: dict, lambda_r: Optional[float] = None):
    """Mean squared pixel error plus ``lambda_r`` times mean squared reward error.

    ``batch`` holds tensors ``maps``, ``vec``, ``act``, ``next_map``, ``reward`` and
    the numpy ``ego`` array. Returns (loss, pixel_mse, reward_mse).
    """
    lam = model.cfg.lambda_r if lambda_r is None else lambda_r
    pred, r = model(batch["maps"], batch["vec"], batch["act"], batch["ego"])
    pix = ((pred - batch["next_map"]) ** 2).mean()
    rew = ((r - batch["reward"]) ** 2).mean()
    return pix + lam * rew, pix, rew


class ModelEnsemble:
    """Bootstrap ensemble of transition models with their optimisers."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), grid: GridConfig = GridConfig(),
                 dt: float = 0.1, seed: int = 0, size: Optional[int] = None):
        n = cfg.ensemble_size if size is None else size
        if n < 1:
            raise ContractViolation("ensemble needs at least one member")
        self.cfg, self.grid, self.dt = cfg, grid, dt
        self.members = [TransitionModel(cfg, grid, dt, seed=seed * 1000 + i) for i in range(n)]
        self.optims = [dc.Adam(m.params(), lr=cfg.lr) for m in self.members]
        self.last_val_mse: list[float] = [math.nan] * n

    def __len__(self):
        return len(self.members)

    def tensors(self, prefix: str = "model/") -> dict:
        out = {}
        for i, m in enumerate(self.members):
            for n, p in m.named_parameters():
                out[f"{prefix}{i}/{n}"] = p
        return out

    def load_tensors(self, arrays, prefix: str = "model/"):
        for i, m in enumerate(self.members):
            dc.load_into(m.params(), arrays, prefix=f"{prefix}{i}/")


def train_model(ensemble: ModelEnsemble, dataset, rng: np.random.Generator,
                steps: Optional[int] = None, batch_size: Optional[int] = None) -> list[float]:
    """Train each member on its own bootstrap resample of ``dataset``.

    ``dataset`` provides ``len()`` and ``model_batch(indices)``. Returns the
    per-member validation pixel MSE on out-of-bag samples (all samples when
    the resample happens to cover everything).
    """
    n = len(dataset)
    steps = ensemble.cfg.steps if steps is None else steps
    bs = ensemble.cfg.batch_size if batch_size is None else batch_size
    if n == 0:
        raise TrainingError("cannot train the transition model on an empty buffer")
    if n < bs:
        raise TrainingError(f"buffer holds {n} samples, fewer than the batch size {bs}")
    val = []
    for model, opt in zip(ensemble.members, ensemble.optims):
        boot = rng.integers(0, n, size=n)
        for _ in range(steps):
            idx = boot[rng.integers(0, n, size=bs)]
            loss, _, _ = model_loss(model, dataset.model_batch(idx))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite model loss {loss.item()}")
            dc.backward(loss)
            opt.step()
        oob = np.setdiff1d(np.arange(n), boot)
        if len(oob) == 0:
            oob = np.arange(n)
        val.append(evaluate_pixel_mse(model, dataset, oob[:256]))
    ensemble.last_val_mse = val
    return val


def evaluate_pixel_mse(model: TransitionModel, dataset, indices, chunk: int = 64) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(indices), chunk):
            b = dataset.model_batch(np.asarray(indices[s:s + chunk]))
            pred, _ = model(b["maps"], b["vec"], b["act"], b["ego"])
            total += float(((pred - b["next_map"]) ** 2).sum())
            count += pred.numel()
    return total / max(count, 1)


def ego_motion_batch(actions_phys: np.ndarray, dt: float) -> np.ndarray:
    """Vectorised :func:`mbsocnav.sim.ego_motion` for (B, 2) physical actions."""
    a = np.asarray(actions_phys, dtype=np.float64).reshape(-1, 2)
    v, w = a[:, 0], a[:, 1]
    straight = np.abs(w) < 1e-9
    w_safe = np.where(straight, 1.0, w)
    th = w * dt
    x = np.where(straight, v * dt, (v / w_safe) * np.sin(th))
    y = np.where(straight, 0.0, -(v / w_safe) * (np.cos(th) - 1.0))
    th = np.where(straight, 0.0, th)
    return np.stack([x, y, np.arctan2(np.sin(th), np.cos(th))], axis=1)


def propagate_goal_batch(goal_rel: np.ndarray, ego: np.ndarray) -> np.ndarray:
    """Goal (distance, bearing) re-expressed after each robot moved by ``ego``."""
    gx = goal_rel[:, 0] * np.cos(goal_rel[:, 1]) - ego[:, 0]
    gy = goal_rel[:, 0] * np.sin(goal_rel[:, 1]) - ego[:, 1]
    c, s = np.cos(ego[:, 2]), np.sin(ego[:, 2])
    nx, ny = c * gx + s * gy, -s * gx + c * gy
    return np.stack([np.hypot(nx, ny), np.arctan2(ny, nx)], axis=1)


def normalize_vector_batch(goal_rel: np.ndarray, vel: np.ndarray, norms: Norms = Norms()) -> np.ndarray:
    return np.stack([
        np.clip(goal_rel[:, 0] / norms.d_max, 0.0, 1.0),
        (goal_rel[:, 1] + math.pi) / (2 * math.pi),
        vel[:, 0] / V_MAX,
        (vel[:, 1] - W_MIN) / (W_MAX - W_MIN),
    ], axis=1).astype(np.float32)


@dataclass
class Rollout:
    """Virtual transitions, one row each, ordered step by step."""
    maps: np.ndarray          # (n, K, H, W) stacks the policy acted on
    next_maps: np.ndarray     # (n, K, H, W)
    goal_rel: np.ndarray
    vel: np.ndarray
    action: np.ndarray        # physical (v, w)
    reward: np.ndarray
    next_goal_rel: np.ndarray
    next_vel: np.ndarray
    done: np.ndarray
    kind: list
    start_index: np.ndarray   # which start state each row descends from
    step: np.ndarray

    def __len__(self):
        return len(self.reward)


def _terminal_kind(r: float, cfg: ModelConfig, r_arrival: float, r_collision: float):
    if r >= cfg.terminal_fraction * r_arrival:
        return "arrived"
    if r <= cfg.terminal_fraction * r_collision:
        return "collided"
    return "running"


def rollout_model(ensemble: ModelEnsemble, maps: np.ndarray, goal_rel: np.ndarray, vel: np.ndarray,
                  policy, horizon: int, rng: np.random.Generator, sigma: float = 0.0,
                  r_arrival: float = 20.0, r_collision: float = -20.0,
                  norms: Norms = Norms()) -> Rollout:
    """Branch ``horizon``-step virtual rollouts from a batch of real start states.

    Each step a uniformly drawn ensemble member predicts the next map and
    reward for every live branch; older frames are re-expressed in the new
    robot frame by the same ego-motion warp; goal and velocity follow the
    kinematics. A branch stops once its predicted reward crosses the
    arrival/collision thresholds.
    """
    if horizon < 1:
        raise ContractViolation("rollout horizon must be >= 1")
    cfg = ensemble.cfg
    dt = ensemble.dt
    grid = ensemble.grid
    maps = np.asarray(maps, dtype=np.float32)
    goal_rel = np.asarray(goal_rel, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    alive = np.arange(len(maps))
    cols = {k: [] for k in ("maps", "next_maps", "goal_rel", "vel", "action", "reward",
                            "next_goal_rel", "next_vel", "done", "start_index", "step")}
    kinds: list = []
    for step in range(horizon):
        if len(alive) == 0:
            break
        vec = normalize_vector_batch(goal_rel, vel, norms)
        a_norm = policy.act_batch(maps, vec, sigma, rng)
        a_phys = actions_to_physical(a_norm)
        member = ensemble.members[int(rng.integers(len(ensemble)))]
        dtype = next(member.parameters()).dtype
        ego = ego_motion_batch(a_phys, dt)
        with torch.no_grad():
            t_maps = torch.as_tensor(maps, dtype=dtype)
            nxt, r = member(t_maps, torch.as_tensor(vec, dtype=dtype),
                            torch.as_tensor(a_norm, dtype=dtype), ego)
            rows, cc = dc.warp_coordinates(ego, grid.height, grid.width, grid.resolution)
            older = dc.bilinear_warp(t_maps[:, 1:], torch.from_numpy(rows), torch.from_numpy(cc))
            new_maps = torch.cat([older, nxt[:, None]], dim=1).numpy()
        r = r.numpy().astype(np.float64)
        new_goal = propagate_goal_batch(goal_rel, ego)
        step_kinds = [_terminal_kind(x, cfg, r_arrival, r_collision) for x in r]
        done = np.array([k != "running" for k in step_kinds])
        for k, v in (("maps", maps), ("next_maps", new_maps), ("goal_rel", goal_rel), ("vel", vel),
                     ("action", a_phys), ("reward", r), ("next_goal_rel", new_goal),
                     ("next_vel", a_phys), ("done", done), ("start_index", alive),
                     ("step", np.full(len(alive), step))):
            cols[k].append(v)
        kinds += step_kinds
        keep = ~done
        alive, maps, goal_rel, vel = alive[keep], new_maps[keep], new_goal[keep], a_phys[keep]
    out = {k: (np.concatenate(v) if v else np.zeros((0,))) for k, v in cols.items()}
    return Rollout(kind=kinds, **out)
