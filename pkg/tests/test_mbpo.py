import math

import numpy as np
import pytest

from mbsocnav.config import Config
from mbsocnav.env import NavEnv, act_all
from mbsocnav.errors import ConfigurationError, TrainingError
from mbsocnav.lidar import LidarConfig
from mbsocnav.mbpo import (LOG_COLUMNS, EnvBuffer, LoopConfig, ModelBuffer, ReplayBuffer, Trainer,
                           collect_env_step, mixed_batch, resume)
from mbsocnav.obsmap import ScanHistory
from mbsocnav.sim import Action, AgentState, AgentStatus, Circle, Pose2, Scenario, WorldState


def tiny_config(**loop):
    base = dict(E=100, N=1, R=10, M=2, P=1, h=5, model_retrain_every=1000)
    base.update(loop)
    cfg = Config(scenario=Scenario("random", n_agents=4))
    cfg = cfg.with_overrides("sim", timeout_ticks=40)
    cfg = cfg.with_overrides("model", enc1_channels=4, enc2_channels=8, hidden_channels=8, embed_dim=8,
                             fused_channels=8, dec1_channels=8, dec2_channels=4, reward_hidden=16,
                             batch_size=8, steps=2, ensemble_size=2)
    cfg = cfg.with_overrides("td3", conv_channels=(2, 4), hidden=16, batch_size=8)
    cfg = cfg.with_overrides("eval", train_episodes=1, train_every=1000)
    return cfg.replace(loop=LoopConfig(**base))


class Forward:
    name = "forward"

    def act_observations(self, obs, sigma=0.0, rng=None):
        return [Action(1.0, 0.0) for _ in obs]


def crafted_env(agents, obstacles=()):
    cfg = tiny_config()
    env = NavEnv(Scenario("random", n_agents=len(agents)), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    env.reset()
    env.world = WorldState(agents=tuple(agents), obstacles=tuple(obstacles))
    env.histories = {i: ScanHistory(env._scan(i)) for i in range(len(agents))}
    return env, cfg


# -- loop accounting ---------------------------------------------------------------

def test_counting_example(tmp_path):
    res = Trainer(tiny_config(), seed=0, out_dir=str(tmp_path)).run()
    assert res.env_steps == 110
    assert res.d_env_size == 110
    assert res.d_model_size == 10 * 2 * 5
    assert (tmp_path / "checkpoint.ckpt").exists()


def test_ablation_leaves_model_buffer_empty():
    cfg = tiny_config()
    cfg = cfg.replace(loop=cfg.loop.as_ablation())
    tr = Trainer(cfg, seed=0)
    assert tr.ensemble is None
    res = tr.run()
    assert res.d_model_size == 0 and res.d_env_size == 110
    assert all(row[-1] == 0 for row in res.rows)


def test_same_seed_identical_logs(tmp_path):
    a = Trainer(tiny_config(), seed=3, out_dir=str(tmp_path / "a")).run()
    b = Trainer(tiny_config(), seed=3, out_dir=str(tmp_path / "b")).run()
    text = (tmp_path / "a" / "train_log.csv").read_text()
    assert text == (tmp_path / "b" / "train_log.csv").read_text()
    assert text.splitlines()[0] == ",".join(LOG_COLUMNS)
    assert len(text.splitlines()) == 1 + 110
    assert a.evals == b.evals


def test_different_seeds_differ():
    a = Trainer(tiny_config(), seed=1).run()
    b = Trainer(tiny_config(), seed=2).run()
    assert a.rows != b.rows


def test_buffer_sizes_track_env_steps():
    tr = Trainer(tiny_config(E=20, model_retrain_every=5), seed=0)
    tr.explore()
    assert len(tr.d_env) == tr.env_step == 20
    tr.fit_model()
    for _ in range(7):
        tr.learn_step()
    assert len(tr.d_env) == tr.env_step == 27
    assert math.isfinite(tr.model_mse)


# -- environment collection ---------------------------------------------------------

def test_four_agent_world_appends_one_sample_per_step():
    cfg = tiny_config()
    env = NavEnv(Scenario("random", n_agents=4, seed=5), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    buf = EnvBuffer(100, cfg)
    rng = np.random.default_rng(0)
    for k in range(12):
        collect_env_step(env, Forward(), buf, 0.0, rng)
        assert len(buf) == k + 1


def test_peer_transitions_flag_adds_every_active_agent():
    cfg = tiny_config()
    env = NavEnv(Scenario("random", n_agents=4, seed=5), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    buf = EnvBuffer(100, cfg)
    env.reset()
    active = len(env.world.active_indices())
    collect_env_step(env, Forward(), buf, 0.0, np.random.default_rng(0), use_peers=True)
    assert len(buf) == active


def test_main_collision_sample_is_terminal():
    main = AgentState(Pose2(0.0, 0.0, 0.0), goal=(-5.0, 0.0))
    env, cfg = crafted_env([main], [Circle((0.65, 0.0), 0.3)])
    buf = EnvBuffer(10, cfg)
    episode = env.episode
    tr = collect_env_step(env, Forward(), buf, 0.0, np.random.default_rng(0))
    assert tr.done and tr.kind == "collided" and tr.reward <= -20 + 1
    row = buf.rows(np.array([0]))
    assert row["done"][0] and row["kind"][0] == 2
    assert env.episode == episode + 1  # regenerated with the next seed


def test_peer_collision_keeps_main_running():
    main = AgentState(Pose2(0.0, 0.0, 0.0), goal=(5.0, 0.0))
    peer = AgentState(Pose2(0.0, 5.0, 0.0), goal=(0.0, -5.0))
    env, cfg = crafted_env([main, peer], [Circle((0.65, 5.0), 0.3)])
    buf = EnvBuffer(10, cfg)
    rng = np.random.default_rng(0)
    tr = collect_env_step(env, Forward(), buf, 0.0, rng)
    assert not tr.done and tr.kind == "running"
    assert env.world.agents[1].status is AgentStatus.COLLIDED
    frozen = env.world.agents[1].pose
    assert list(act_all(env, Forward())) == [0]
    collect_env_step(env, Forward(), buf, 0.0, rng)
    assert env.world.agents[1].pose == frozen
    assert len(buf) == 2


# -- buffers ---------------------------------------------------------------------------

def test_replay_buffer_fifo_eviction(rng):
    buf = ReplayBuffer(3, {"x": ((), np.int64)}, origin="env")
    for i in range(5):
        buf.add(x=i)
    assert len(buf) == 3
    assert sorted(buf.cols["x"].tolist()) == [2, 3, 4]
    idx = buf.sample_indices(1000, rng)
    assert idx.min() >= 0 and idx.max() < 3
    assert set(np.bincount(idx)) and min(np.bincount(idx, minlength=3)) > 250
    buf.add_batch(x=np.arange(10, 17))
    assert sorted(buf.cols["x"].tolist()) == [14, 15, 16]


def test_empty_buffer_sampling_raises(rng):
    with pytest.raises(TrainingError):
        ReplayBuffer(3, {"x": ((), np.int64)}, origin="model").sample_indices(1, rng)


def test_mixed_batch_ratio(rng):
    cfg = tiny_config()
    env = NavEnv(Scenario("random", n_agents=2, seed=1), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    d_env = EnvBuffer(50, cfg)
    for _ in range(20):
        collect_env_step(env, Forward(), d_env, 0.0, rng)
    d_model = ModelBuffer(50, cfg)
    b = mixed_batch(d_env, d_model, 10, 0.1, 4, rng)
    assert b["maps"].shape == (10, 10, 16, 16)  # all real while D_model is empty
    n = 30
    d_model.add_batch(maps=np.zeros((n, 10, 16, 16), np.uint8), next_maps=np.zeros((n, 10, 16, 16), np.uint8),
                      vec=np.zeros((n, 4), np.float32), next_vec=np.zeros((n, 4), np.float32),
                      act=np.zeros((n, 2), np.float32), reward=np.full(n, 99.0), done=np.zeros(n, bool))
    b = mixed_batch(d_env, d_model, 10, 0.1, 4, rng)
    assert int((b["reward"] == 99.0).sum()) == 9


def test_env_buffer_rebuilds_observation_stacks(rng):
    cfg = tiny_config()
    env = NavEnv(Scenario("random", n_agents=3, seed=2), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    d_env = EnvBuffer(50, cfg)
    env.reset()
    for _ in range(12):
        if env.main_done:
            break
        obs = env.observation(env.main_index)
        d_env.add_transition(env.step(act_all(env, Forward())).transition)
        maps, _ = d_env.stacks(np.array([len(d_env) - 1]), with_next=False)
        assert np.array_equal(maps[0], obs.maps)


# -- checkpoints and resume -------------------------------------------------------

def test_exact_resume_is_bitwise(tmp_path):
    cfg = tiny_config(E=40, R=20, rng_complete=True)
    tr = Trainer(cfg, seed=4, out_dir=str(tmp_path / "a"))
    tr.explore()
    tr.fit_model()
    tr.run_eval()
    for _ in range(5):
        tr.learn_step()
    ckpt = tr.checkpoint(str(tmp_path / "mid.ckpt"))
    for _ in range(5):
        tr.learn_step()
    back = resume(ckpt, str(tmp_path / "b"))
    n0 = len(back.rows)
    for _ in range(5):
        back.learn_step()
    assert back.rows[n0:] == tr.rows[-5:]
    assert back.policy.params("actor").checksum() == tr.policy.params("actor").checksum()


def test_plain_resume_continues_training(tmp_path):
    cfg = tiny_config(E=40, R=20)
    tr = Trainer(cfg, seed=5, out_dir=str(tmp_path / "a"))
    tr.explore()
    tr.fit_model()
    for _ in range(3):
        tr.learn_step()
    ckpt = tr.checkpoint()
    back = resume(ckpt, str(tmp_path / "b"))
    assert back.env_step == 43
    assert back.policy.params("actor").checksum() == tr.policy.params("actor").checksum()
    assert back.policy.actor_opt.t == tr.policy.actor_opt.t
    res = back.run()
    assert res.env_steps == cfg.loop.total_env_steps
    assert all(math.isfinite(r[4]) for r in res.rows[-5:])


def test_training_error_checkpoints_then_aborts(tmp_path, monkeypatch):
    tr = Trainer(tiny_config(E=20), seed=0, out_dir=str(tmp_path))

    def boom(*a, **k):
        raise TrainingError("non-finite critic loss nan")
    monkeypatch.setattr(tr.policy, "update", boom)
    with pytest.raises(TrainingError):
        tr.run()
    assert (tmp_path / "aborted.ckpt").exists()


# -- configuration ---------------------------------------------------------------

def test_loop_config_validation():
    with pytest.raises(ConfigurationError):
        LoopConfig(ablation=True)  # default M = 20
    with pytest.raises(ConfigurationError):
        LoopConfig(E=0)
    with pytest.raises(ConfigurationError):
        LoopConfig(P=-1)
    assert LoopConfig().as_ablation().M == 0
    assert LoopConfig(E=100, N=1, R=10).total_env_steps == 110


def test_config_rejected_before_stepping():
    cfg = tiny_config(E=4)
    with pytest.raises(ConfigurationError):
        Trainer(cfg)
    with pytest.raises(ConfigurationError):
        Trainer(tiny_config().with_overrides("reward", goal_tolerance=0.5))
