"""The model-based training loop: random exploration, model fitting, short
branched model rollouts into a virtual buffer, and TD3 updates on mixed
real/virtual batches. ``ablation`` switches the model off entirely."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import pickle
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
import torch

from . import diffcore as dc
from . import kernels
from .env import NavEnv, RandomPolicy, Transition, act_all
from .errors import ConfigurationError, TrainingError
from .evaluate import evaluate, mean_return
from .obsmap import STACK_LEN, relative_pose_array
from .policy import ActorCritic, pool_maps
from .sim import V_MAX, W_MAX, W_MIN
from .world_model import (ModelEnsemble, Rollout, ego_motion_batch, normalize_vector_batch, rollout_model,
                          train_model)

if TYPE_CHECKING:
    from .config import Config

log = logging.getLogger(__name__)

KINDS = ("running", "arrived", "collided", "timed_out")
LOG_COLUMNS = ["env_step", "epoch", "avg_reward_eval", "model_mse", "critic_loss", "actor_loss",
               "d_env_size", "d_model_size"]


@dataclass(frozen=True)
class LoopConfig:
    E: int = 2000
    N: int = 50
    R: int = 500
    M: int = 20
    P: int = 10
    h: int = 5
    model_retrain_every: int = 1000
    env_capacity: int = 100_000
    model_capacity: int = 400_000
    ablation: bool = False
    use_peer_transitions: bool = False
    checkpoint_every: int = 0
    rng_complete: bool = False

    def __post_init__(self):
        for name in ("E", "N", "R", "h", "model_retrain_every", "env_capacity", "model_capacity"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"loop.{name} must be >= 1")
        if self.M < 0 or self.P < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("loop.M, loop.P and loop.checkpoint_every must be >= 0")
        if self.ablation and self.M != 0:
            raise ConfigurationError("the model-free ablation requires M = 0")

    def as_ablation(self) -> "LoopConfig":
        return dataclasses.replace(self, ablation=True, M=0)

    @property
    def total_env_steps(self) -> int:
        return self.E + self.N * self.R


# -- replay buffers ---------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of named columns; the oldest rows are evicted first."""

    def __init__(self, capacity: int, columns: dict, origin: str):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be >= 1")
        self.capacity, self.origin = capacity, origin
        # np.zeros maps lazily, so untouched capacity costs no memory
        self.cols = {k: np.zeros((capacity, *shape), dtype=dtype) for k, (shape, dtype) in columns.items()}
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add_batch(self, **cols):
        n = len(next(iter(cols.values())))
        if set(cols) != set(self.cols):
            raise ConfigurationError(f"buffer columns {sorted(self.cols)} vs {sorted(cols)}")
        if n > self.capacity:
            cols = {k: v[-self.capacity:] for k, v in cols.items()}
            n = self.capacity
        pos = (self.head + np.arange(n)) % self.capacity
        for k, v in cols.items():
            self.cols[k][pos] = v
        self.head = (self.head + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def add(self, **row):
        self.add_batch(**{k: np.asarray(v)[None] for k, v in row.items()})

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise TrainingError(f"cannot sample from the empty {self.origin} buffer")
        return rng.integers(0, self.size, size=n)

    def rows(self, idx) -> dict:
        return {k: v[idx] for k, v in self.cols.items()}

    # pickle only the filled rows; slots [0, size) are always the occupied ones
    def __getstate__(self):
        st = self.__dict__.copy()
        st["cols"] = {k: (v.shape, v.dtype, v[:self.size].copy()) for k, v in self.cols.items()}
        return st

    def __setstate__(self, st):
        cols = {}
        for k, (shape, dtype, filled) in st["cols"].items():
            cols[k] = np.zeros(shape, dtype=dtype)
            cols[k][:len(filled)] = filled
        self.__dict__.update(st, cols=cols)


def _norm_actions(a_phys: np.ndarray) -> np.ndarray:
    return np.stack([a_phys[:, 0] / V_MAX, (a_phys[:, 1] - W_MIN) / (W_MAX - W_MIN)], axis=1).astype(np.float32)


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.get_default_dtype())


class EnvBuffer(ReplayBuffer):
    """D_env: real transitions stored as raw scan windows; map stacks are rebuilt on demand."""

    def __init__(self, capacity: int, cfg: "Config"):
        n = cfg.lidar.n_beams
        super().__init__(capacity, {
            "ranges": ((STACK_LEN + 1, n), np.float64), "poses": ((STACK_LEN + 1, 3), np.float64),
            "goal_rel": ((2,), np.float64), "vel": ((2,), np.float64), "action": ((2,), np.float64),
            "next_goal_rel": ((2,), np.float64), "next_vel": ((2,), np.float64),
            "reward": ((), np.float64), "done": ((), np.bool_), "kind": ((), np.int8),
        }, origin="env")
        self.cfg = cfg
        self.beams = cfg.lidar.beam_angles()

    def add_transition(self, tr: Transition):
        self.add(ranges=tr.ranges, poses=tr.poses, goal_rel=tr.goal_rel,
                 vel=(tr.vel.v, tr.vel.w), action=(tr.action.v, tr.action.w),
                 next_goal_rel=tr.next_goal_rel, next_vel=(tr.next_vel.v, tr.next_vel.w),
                 reward=tr.reward, done=tr.done, kind=KINDS.index(tr.kind))

    def _stack(self, ranges, poses, pool=1):
        """Rasterize (B, K, beams) scan windows with their (B, K, 3) poses into (B, K, H, W)."""
        g = self.cfg.grid
        b, k = ranges.shape[:2]
        flat = kernels.rasterize_stack(np.ascontiguousarray(ranges.reshape(b * k, -1)), self.beams,
                                       self.cfg.lidar.max_range,
                                       np.ascontiguousarray(relative_pose_array(poses).reshape(b * k, 3)),
                                       g.height, g.width, g.resolution, pool)
        return flat.reshape(b, k, g.height // pool, g.width // pool)

    def stacks(self, idx, with_next: bool = True, pool: int = 1):
        """Observation stacks (B, K, H, W) and, optionally, next stacks; max-pooled by ``pool``."""
        r, p = self.cols["ranges"][idx], self.cols["poses"][idx]
        maps = self._stack(r[:, :-1], p[:, :-1], pool)
        if not with_next:
            return maps, None
        return maps, self._stack(r[:, 1:], p[:, 1:], pool)

    def model_batch(self, idx) -> dict:
        idx = np.asarray(idx)
        maps, _ = self.stacks(idx, with_next=False)
        g = self.cfg.grid
        nxt = kernels.rasterize_stack(np.ascontiguousarray(self.cols["ranges"][idx, -1]), self.beams,
                                      self.cfg.lidar.max_range, np.zeros((len(idx), 3)), g.height, g.width,
                                      g.resolution)
        act = self.cols["action"][idx]
        return {
            "maps": _t(maps), "vec": _t(normalize_vector_batch(self.cols["goal_rel"][idx], self.cols["vel"][idx],
                                                               self.cfg.norms)),
            "act": _t(_norm_actions(act)), "ego": ego_motion_batch(act, self.cfg.sim.dt),
            "next_map": _t(nxt), "reward": _t(self.cols["reward"][idx]),
        }

    def policy_batch(self, idx, pool: int) -> dict:
        idx = np.asarray(idx)
        maps, nxt = self.stacks(idx, pool=pool)
        c, norms = self.cols, self.cfg.norms
        return {
            "maps": _t(maps), "next_maps": _t(nxt),
            "vec": _t(normalize_vector_batch(c["goal_rel"][idx], c["vel"][idx], norms)),
            "next_vec": _t(normalize_vector_batch(c["next_goal_rel"][idx], c["next_vel"][idx], norms)),
            "act": _t(_norm_actions(c["action"][idx])), "reward": _t(c["reward"][idx]),
            "done": _t(c["done"][idx].astype(np.float64)),
        }

    def start_states(self, idx):
        maps, _ = self.stacks(np.asarray(idx), with_next=False)
        return maps, self.cols["goal_rel"][idx], self.cols["vel"][idx]


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


class ModelBuffer(ReplayBuffer):
    """D_model: virtual transitions with policy-resolution maps quantized to 8 bits."""

    def __init__(self, capacity: int, cfg: "Config"):
        p = cfg.td3.pool
        shape = (STACK_LEN, cfg.grid.height // p, cfg.grid.width // p)
        super().__init__(capacity, {
            "maps": (shape, np.uint8), "next_maps": (shape, np.uint8),
            "vec": ((4,), np.float32), "next_vec": ((4,), np.float32), "act": ((2,), np.float32),
            "reward": ((), np.float64), "done": ((), np.bool_),
        }, origin="model")
        self.cfg = cfg

    def add_rollout(self, ro: Rollout):
        if len(ro) == 0:
            return
        pool, norms = self.cfg.td3.pool, self.cfg.norms
        self.add_batch(maps=_quantize(pool_maps(ro.maps, pool)), next_maps=_quantize(pool_maps(ro.next_maps, pool)),
                       vec=normalize_vector_batch(ro.goal_rel, ro.vel, norms),
                       next_vec=normalize_vector_batch(ro.next_goal_rel, ro.next_vel, norms),
                       act=_norm_actions(ro.action), reward=ro.reward, done=ro.done)

    def policy_batch(self, idx, pool: int = 0) -> dict:
        c = self.rows(np.asarray(idx))
        return {
            "maps": _t(c["maps"] / np.float32(255)), "next_maps": _t(c["next_maps"] / np.float32(255)),
            "vec": _t(c["vec"]), "next_vec": _t(c["next_vec"]), "act": _t(c["act"]),
            "reward": _t(c["reward"]), "done": _t(c["done"].astype(np.float64)),
        }


def mixed_batch(d_env: EnvBuffer, d_model: ModelBuffer, batch_size: int, real_ratio: float,
                pool: int, rng: np.random.Generator) -> dict:
    """``real_ratio`` of the batch from D_env, the rest from D_model (all real while D_model is empty)."""
    n_real = batch_size if len(d_model) == 0 else int(round(real_ratio * batch_size))
    parts = []
    if n_real > 0:
        parts.append(d_env.policy_batch(d_env.sample_indices(n_real, rng), pool))
    if batch_size - n_real > 0:
        parts.append(d_model.policy_batch(d_model.sample_indices(batch_size - n_real, rng)))
    if len(parts) == 1:
        return parts[0]
    return {k: torch.cat([p[k] for p in parts]) for k in parts[0]}


# -- loop --------------------------------------------------------------------------

def collect_env_step(env: NavEnv, policy, d_env: EnvBuffer, sigma: float, rng: np.random.Generator,
                     use_peers: bool = False) -> Transition:
    """Act with the shared policy for every active agent; store the main agent's transition.

    Resets the world (next scenario seed) as soon as the main agent is done.
    """
    if env.world is None or env.main_done:
        env.reset()
    st = env.step(act_all(env, policy, sigma, rng), record_peers=use_peers)
    d_env.add_transition(st.transition)
    for tr in st.peer_transitions:
        d_env.add_transition(tr)
    if env.main_done:
        env.reset()
    return st.transition


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


@dataclass
class TrainResult:
    log_path: Optional[str]
    rows: list
    evals: list          # (env_step, mean eval return)
    env_steps: int
    d_env_size: int
    d_model_size: int


class Trainer:
    """Owns every piece of mutable training state; ``run`` executes the whole loop."""

    def __init__(self, cfg: "Config", seed: int = 0, out_dir: Optional[str] = None):
        cfg.validate()
        self.cfg, self.seed, self.out_dir = cfg, int(seed), out_dir
        lc = cfg.loop
        self.rng = np.random.default_rng(self.seed)
        self.policy = ActorCritic(cfg.td3, cfg.grid, cfg.norms, seed=self.seed)
        self.ensemble = None if lc.ablation else ModelEnsemble(cfg.model, cfg.grid, cfg.sim.dt, seed=self.seed)
        train_scenario = cfg.scenario.with_seed(cfg.scenario.seed + 1_000_003 * self.seed)
        self.env = NavEnv(train_scenario, cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
        self.d_env = EnvBuffer(lc.env_capacity, cfg)
        self.d_model = ModelBuffer(lc.model_capacity, cfg)
        self.env_step = 0
        self.epoch = 0
        self.since_retrain = 0
        self.model_mse = math.nan
        self.last_eval = math.nan
        self.evals: list = []
        self.rows: list = []
        self.log_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.log_path = os.path.join(out_dir, "train_log.csv")

    # -- pieces --------------------------------------------------------------
    def _log(self, critic_loss=math.nan, actor_loss=math.nan):
        row = [self.env_step, self.epoch, self.last_eval, self.model_mse, critic_loss, actor_loss,
               len(self.d_env), len(self.d_model)]
        self.rows.append(row)
        if self.log_path is not None:
            new = not os.path.exists(self.log_path)
            with open(self.log_path, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if new:
                    w.writerow(LOG_COLUMNS)
                w.writerow([_fmt(x) for x in row])

    def _collect(self, policy, sigma: float) -> Transition:
        tr = collect_env_step(self.env, policy, self.d_env, sigma, self.rng, self.cfg.loop.use_peer_transitions)
        self.env_step += 1
        return tr

    def fit_model(self):
        val = train_model(self.ensemble, self.d_env, self.rng)
        self.model_mse = float(np.mean(val))
        self.since_retrain = 0
        log.info("model fitted at step %d, validation mse %.5f", self.env_step, self.model_mse)

    def model_rollouts(self):
        lc = self.cfg.loop
        idx = self.d_env.sample_indices(lc.M, self.rng)
        maps, goal_rel, vel = self.d_env.start_states(idx)
        ro = rollout_model(self.ensemble, maps, goal_rel, vel, self.policy, lc.h, self.rng,
                           sigma=self.cfg.td3.sigma_act, r_arrival=self.cfg.reward.r_arrival,
                           r_collision=self.cfg.reward.r_collision, norms=self.cfg.norms)
        self.d_model.add_rollout(ro)

    def policy_updates(self) -> tuple[float, float]:
        td3 = self.cfg.td3
        closs, aloss = [], []
        for _ in range(self.cfg.loop.P):
            batch = mixed_batch(self.d_env, self.d_model, td3.batch_size, td3.real_ratio, td3.pool, self.rng)
            out = self.policy.update(batch, self.rng)
            closs.append(out["critic_loss"])
            if not math.isnan(out["actor_loss"]):
                aloss.append(out["actor_loss"])
        return (float(np.mean(closs)) if closs else math.nan,
                float(np.mean(aloss)) if aloss else math.nan)

    def run_eval(self) -> float:
        ev = self.cfg.eval
        _, traces = evaluate(self.policy, self.cfg.scenario, ev.train_episodes, ev.seed_base,
                             self.cfg.sim, self.cfg.lidar, self.cfg.grid, self.cfg.reward, ev.comfort_margin)
        self.last_eval = mean_return(traces)
        self.evals.append((self.env_step, self.last_eval))
        return self.last_eval

    # -- phases -------------------------------------------------------------
    def explore(self):
        rand = RandomPolicy()
        while self.env_step < self.cfg.loop.E:
            self._collect(rand, 0.0)
            self._log()

    def learn_step(self):
        lc, td3 = self.cfg.loop, self.cfg.td3
        self._collect(self.policy, td3.sigma_act)
        if self.ensemble is not None:
            self.since_retrain += 1
            if self.since_retrain >= lc.model_retrain_every:
                self.fit_model()
            if lc.M > 0:
                self.model_rollouts()
        closs, aloss = self.policy_updates()
        if (self.env_step - lc.E) % self.cfg.eval.train_every == 0:
            self.run_eval()
        self._log(closs, aloss)
        if lc.checkpoint_every and self.out_dir and (self.env_step - lc.E) % lc.checkpoint_every == 0:
            self.checkpoint()

    def run(self) -> TrainResult:
        lc = self.cfg.loop
        try:
            if self.env_step < lc.E:
                self.explore()
                if self.ensemble is not None:
                    self.fit_model()
                self.run_eval()
            while self.env_step < lc.total_env_steps:
                self.epoch = 1 + (self.env_step - lc.E) // lc.R
                self.learn_step()
        except TrainingError:
            if self.out_dir:
                self.checkpoint(os.path.join(self.out_dir, "aborted.ckpt"))
            raise
        if self.out_dir:
            self.checkpoint()
        return TrainResult(self.log_path, self.rows, self.evals, self.env_step, len(self.d_env),
                           len(self.d_model))

    # -- persistence --------------------------------------------------------
    def tensors(self) -> dict:
        out = {f"policy/{k}": v for k, v in self.policy.tensors().items()}
        out.update(self.policy.actor_opt.state_tensors("opt/actor/"))
        out.update(self.policy.critic_opt.state_tensors("opt/critic/"))
        if self.ensemble is not None:
            out.update(self.ensemble.tensors("model/"))
            for i, o in enumerate(self.ensemble.optims):
                out.update(o.state_tensors(f"opt/model{i}/"))
        return out

    def checkpoint(self, path: Optional[str] = None) -> str:
        """Parameters and optimiser moments in the checkpoint format; with
        ``loop.rng_complete`` also a pickle of the full trainer for exact resume."""
        path = path or os.path.join(self.out_dir, "checkpoint.ckpt")
        hyper = {"env_step": self.env_step, "epoch": self.epoch, "seed": self.seed,
                 "policy_updates": self.policy.updates, "actor_t": self.policy.actor_opt.t,
                 "critic_t": self.policy.critic_opt.t,
                 "model_t": [o.t for o in self.ensemble.optims] if self.ensemble else [],
                 "config": self.cfg.to_dict()}
        dc.save_checkpoint(path, self.tensors(), hyper=hyper, rng_state=self.rng.bit_generator.state)
        if self.cfg.loop.rng_complete:
            with open(path + ".state", "wb") as fh:
                pickle.dump(self, fh)
        return path


def resume(path: str, out_dir: Optional[str] = None) -> Trainer:
    """Continue a run from a checkpoint.

    If the exact-resume state file is present the trainer is restored
    bit-for-bit. Otherwise parameters, optimiser moments, counters and the
    RNG are restored; the replay buffers start empty and are refilled with a
    short burst of noisy restored-policy steps that do not count as env steps.
    """
    from .config import Config
    if os.path.exists(path + ".state"):
        with open(path + ".state", "rb") as fh:
            tr = pickle.load(fh)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            tr.out_dir, tr.log_path = out_dir, os.path.join(out_dir, "train_log.csv")
        return tr
    arrays, header = dc.load_checkpoint(path)
    hyper = header["hyper"]
    cfg = Config.from_dict(hyper["config"])
    tr = Trainer(cfg, hyper["seed"], out_dir)
    tr.policy.load_tensors({k[len("policy/"):]: v for k, v in arrays.items() if k.startswith("policy/")})
    tr.policy.actor_opt.load_state_tensors("opt/actor/", arrays, hyper["actor_t"])
    tr.policy.critic_opt.load_state_tensors("opt/critic/", arrays, hyper["critic_t"])
    tr.policy.updates = hyper["policy_updates"]
    if tr.ensemble is not None:
        tr.ensemble.load_tensors(arrays, "model/")
        for i, o in enumerate(tr.ensemble.optims):
            o.load_state_tensors(f"opt/model{i}/", arrays, hyper["model_t"][i])
    tr.rng.bit_generator.state = header["rng_state"]
    tr.env_step, tr.epoch = hyper["env_step"], hyper["epoch"]
    refill = min(cfg.loop.E, max(cfg.model.batch_size, cfg.td3.batch_size))
    for _ in range(refill):
        collect_env_step(tr.env, tr.policy, tr.d_env, cfg.td3.sigma_act, tr.rng, cfg.loop.use_peer_transitions)
    if tr.ensemble is not None and tr.env_step >= cfg.loop.E:
        tr.fit_model()
    return tr


def run_training(cfg: "Config", seed: int = 0, out_dir: Optional[str] = None) -> TrainResult:
    return Trainer(cfg, seed, out_dir).run()
