"""TD3 actor-critic over the normalized observation, shared by all agents."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import diffcore as dc
from .errors import ConfigurationError, ContractViolation, TrainingError
from .obsmap import STACK_LEN, GridConfig, Norms, Observation, actions_to_physical, normalize_vector
from .sim import Action

@dataclass(frozen=True)
class TD3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    sigma_act: float = 0.1
    sigma_target: float = 0.2
    noise_clip: float = 0.5
    batch_size: int = 128
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    real_ratio: float = 0.1
    pool: int = 4
    conv_channels: tuple = (8, 16)
    hidden: int = 128
    vec_embed: int = 64
    # L2 on the actor's pre-tanh outputs; keeps the squash out of saturation, where its gradient vanishes
    preact_l2: float = 1e-2

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must be in (0, 1)")
        if self.policy_delay < 1:
            raise ConfigurationError("policy_delay must be >= 1")
        if not 0 <= self.real_ratio <= 1:
            raise ConfigurationError("real_ratio must be in [0, 1]")


def pool_maps(maps: np.ndarray, pool: int) -> np.ndarray:
    """Max-pool (..., H, W) maps by ``pool`` in both directions."""
    maps = np.asarray(maps, dtype=np.float32)
    if pool == 1:
        return maps
    out = maps[..., 0::pool, 0::pool].copy()
    for i in range(pool):
        for j in range(pool):
            np.maximum(out, maps[..., i::pool, j::pool], out=out)
    return out


class MapEncoder(nn.Module):
    """3D convolutions over the (pooled) ten-frame stack."""

    def __init__(self, grid: GridConfig, cfg: TD3Config, generator):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.conv1 = dc.Conv3d(1, c1, 3, stride=2, padding=1, generator=generator)
        self.conv2 = dc.Conv3d(c1, c2, 3, stride=2, padding=1, generator=generator)
        d, h, w = STACK_LEN, grid.height // cfg.pool, grid.width // cfg.pool
        for _ in range(2):
            d, h, w = (d + 1) // 2, (h + 1) // 2, (w + 1) // 2
        self.n_out = c2 * d * h * w

    def forward(self, maps):
        x = dc.relu(self.conv1(maps.unsqueeze(1)))
        return dc.relu(self.conv2(x)).flatten(1)


class Actor(nn.Module):
    def __init__(self, grid: GridConfig, cfg: TD3Config, generator):
        super().__init__()
        self.enc = MapEncoder(grid, cfg, generator)
        self.vec_fc = dc.Dense(4, cfg.vec_embed, generator=generator)
        self.fc1 = dc.Dense(self.enc.n_out + cfg.vec_embed, cfg.hidden, generator=generator)
        self.fc2 = dc.Dense(cfg.hidden, cfg.hidden, generator=generator)
        self.fc3 = dc.Dense(cfg.hidden, 2, generator=generator)

    def preactivation(self, maps, vec):
        x = dc.concat([self.enc(maps), dc.relu(self.vec_fc(vec))], dim=1)
        return self.fc3(dc.relu(self.fc2(dc.relu(self.fc1(x)))))

    def forward(self, maps, vec):
        """Normalized action in [0, 1]^2: squash with tanh then map affinely."""
        return squash(self.preactivation(maps, vec))


def squash(pre):
    return 0.5 * (dc.tanh(pre) + 1.0)


class Critic(nn.Module):
    def __init__(self, grid: GridConfig, cfg: TD3Config, generator):
        super().__init__()
        self.enc = MapEncoder(grid, cfg, generator)
        self.vec_fc = dc.Dense(6, cfg.vec_embed, generator=generator)
        self.fc1 = dc.Dense(self.enc.n_out + cfg.vec_embed, cfg.hidden, generator=generator)
        self.fc2 = dc.Dense(cfg.hidden, cfg.hidden, generator=generator)
        self.fc3 = dc.Dense(cfg.hidden, 1, generator=generator)

    def forward(self, maps, vec, act):
        x = dc.concat([self.enc(maps), dc.relu(self.vec_fc(dc.concat([vec, act], dim=1)))], dim=1)
        return self.fc3(dc.relu(self.fc2(dc.relu(self.fc1(x))))).squeeze(1)


def critic_target(reward, done, q1_next, q2_next, gamma):
    """y = r + γ (1 − done) min(Q1', Q2')."""
    return reward + gamma * (1.0 - done) * torch.minimum(q1_next, q2_next)


def actor_objective(ac, maps, vec):
    """-Q1(s, pi(s)) plus the pre-activation penalty, averaged over the batch."""
    pre = ac.actor.preactivation(maps, vec)
    loss = -ac.critic1(maps, vec, squash(pre)).mean()
    if ac.cfg.preact_l2 > 0:
        loss = loss + ac.cfg.preact_l2 * (pre ** 2).mean()
    return loss


class ActorCritic:
    """Online and target actor plus twin critics, with their optimisers."""

    def __init__(self, cfg: TD3Config = TD3Config(), grid: GridConfig = GridConfig(),
                 norms: Norms = Norms(), seed: int = 0):
        if grid.height % cfg.pool or grid.width % cfg.pool:
            raise ConfigurationError("grid size must be divisible by the policy pooling factor")
        self.cfg, self.grid, self.norms = cfg, grid, norms
        g = torch.Generator().manual_seed(seed)
        self.actor = Actor(grid, cfg, g)
        self.critic1 = Critic(grid, cfg, g)
        self.critic2 = Critic(grid, cfg, g)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic1_target = copy.deepcopy(self.critic1)
        self.critic2_target = copy.deepcopy(self.critic2)
        self.actor_opt = dc.Adam(self.params("actor"), lr=cfg.actor_lr)
        self.critic_opt = dc.Adam(self.critic_params(), lr=cfg.critic_lr)
        self.updates = 0

    def params(self, name: str) -> dc.ParamSet:
        return dc.ParamSet.from_module(getattr(self, name))

    def critic_params(self) -> dc.ParamSet:
        return dc.ParamSet({**{f"critic1.{n}": p for n, p in self.critic1.named_parameters()},
                            **{f"critic2.{n}": p for n, p in self.critic2.named_parameters()}})

    @property
    def dtype(self):
        return self.actor.fc3.weight.dtype

    # -- acting -------------------------------------------------------------
    def act_normalized(self, pooled: np.ndarray, vec: np.ndarray, sigma: float = 0.0,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Batched normalized actions for pooled maps (B, K, h, w) and vectors (B, 4)."""
        with torch.no_grad():
            a = self.actor(torch.as_tensor(pooled, dtype=self.dtype),
                           torch.as_tensor(vec, dtype=self.dtype)).numpy().astype(np.float64)
        if sigma > 0:
            if rng is None:
                raise ContractViolation("exploration noise needs an rng")
            a = a + rng.normal(0.0, sigma, size=a.shape)
        return np.clip(a, 0.0, 1.0)

    def act_batch(self, maps: np.ndarray, vec: np.ndarray, sigma: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Like :meth:`act_normalized` but takes full-resolution maps."""
        return self.act_normalized(pool_maps(maps, self.cfg.pool), vec, sigma, rng)

    def act_observations(self, observations: Sequence[Observation], sigma: float = 0.0,
                         rng: Optional[np.random.Generator] = None) -> list[Action]:
        if not observations:
            return []
        maps = np.stack([o.maps for o in observations])
        vec = np.stack([normalize_vector(o.goal_rel, o.vel, self.norms) for o in observations])
        phys = actions_to_physical(self.act_batch(maps, vec, sigma, rng))
        return [Action(float(v), float(w)) for v, w in phys]

    # -- learning -----------------------------------------------------------
    def update(self, batch: dict, rng: np.random.Generator) -> dict:
        """One TD3 step on a batch of tensors (pooled maps, vectors, normalized actions)."""
        cfg = self.cfg
        self.updates += 1
        maps, vec, act = batch["maps"], batch["vec"], batch["act"]
        with torch.no_grad():
            noise = torch.as_tensor(rng.normal(0.0, cfg.sigma_target, size=tuple(act.shape)), dtype=act.dtype)
            noise = noise.clamp(-cfg.noise_clip, cfg.noise_clip)
            a_next = (self.actor_target(batch["next_maps"], batch["next_vec"]) + noise).clamp(0.0, 1.0)
            q1n = self.critic1_target(batch["next_maps"], batch["next_vec"], a_next)
            q2n = self.critic2_target(batch["next_maps"], batch["next_vec"], a_next)
            y = critic_target(batch["reward"], batch["done"], q1n, q2n, cfg.gamma)
        q1 = self.critic1(maps, vec, act)
        q2 = self.critic2(maps, vec, act)
        critic_loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
        if not torch.isfinite(critic_loss):
            raise TrainingError(f"non-finite critic loss {critic_loss.item()}")
        dc.backward(critic_loss)
        self.critic_opt.step()
        out = {"critic_loss": critic_loss.item(), "actor_loss": math.nan}

        if self.updates % cfg.policy_delay == 0:
            actor_loss = actor_objective(self, maps, vec)
            if not torch.isfinite(actor_loss):
                raise TrainingError(f"non-finite actor loss {actor_loss.item()}")
            dc.backward(actor_loss, wrt=self.params("actor"))
            self.actor_opt.step()
            for name in ("actor", "critic1", "critic2"):
                self.params(name + "_target").soft_update(self.params(name), cfg.tau)
            out["actor_loss"] = actor_loss.item()
        return out

    # -- persistence --------------------------------------------------------
    def tensors(self) -> dict:
        out = {}
        for name in ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target"):
            for n, p in getattr(self, name).named_parameters():
                out[f"{name}/{n}"] = p
        return out

    def load_tensors(self, arrays, names=("actor", "critic1", "critic2",
                                          "actor_target", "critic1_target", "critic2_target")):
        for name in names:
            dc.load_into(self.params(name), arrays, prefix=f"{name}/")
