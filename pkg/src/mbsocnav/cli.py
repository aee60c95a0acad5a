"""Command line entry point: ``mbsocnav train|eval|gen-scenario|rollout-model``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diffcore as dc
from .config import Config
from .env import SCRIPTED, NavEnv, act_all
from .evaluate import evaluate, export_report
from .mbpo import Trainer
from .obsmap import write_pgm
from .policy import ActorCritic
from .sim import SCENARIO_KINDS, Action, Scenario, generate_scenario, world_to_dict
from .world_model import ModelEnsemble, rollout_model

log = logging.getLogger("mbsocnav")


def _config_from_checkpoint(path) -> Config:
    return Config.from_dict(dc.read_checkpoint_header(path)["hyper"]["config"])


def load_policy(path, cfg: Config) -> ActorCritic:
    """Actor weights only; critics stay at initialization."""
    arrays, _ = dc.load_checkpoint(path, prefix="policy/actor/")
    ac = ActorCritic(cfg.td3, cfg.grid, cfg.norms)
    ac.load_tensors({k[len("policy/"):]: v for k, v in arrays.items()}, names=("actor",))
    return ac


def load_ensemble(path, cfg: Config) -> ModelEnsemble:
    arrays, _ = dc.load_checkpoint(path, prefix="model/")
    if not arrays:
        raise SystemExit(f"{path} holds no transition model (was it an ablation run?)")
    ens = ModelEnsemble(cfg.model, cfg.grid, cfg.sim.dt)
    ens.load_tensors(arrays, "model/")
    return ens


def cmd_train(a) -> int:
    cfg = Config.load(a.config) if a.config else Config()
    if a.ablation:
        cfg = cfg.replace(loop=cfg.loop.as_ablation())
    cfg.validate()
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    res = Trainer(cfg, a.seed, a.out).run()
    print(f"env steps {res.env_steps}, |D_env| {res.d_env_size}, |D_model| {res.d_model_size}")
    print(f"log: {res.log_path}")
    return 0


def cmd_eval(a) -> int:
    if a.policy == "learned":
        if not a.checkpoint:
            raise SystemExit("--checkpoint is required for the learned policy")
        cfg = Config.load(a.config) if a.config else _config_from_checkpoint(a.checkpoint)
        policy = load_policy(a.checkpoint, cfg)
    else:
        cfg = Config.load(a.config) if a.config else Config()
        policy = SCRIPTED[a.policy]()
    scen = Scenario(a.suite, seed=0, n_agents=a.n_agents or cfg.scenario.n_agents,
                    bounds=cfg.scenario.bounds, obstacle_density=cfg.scenario.obstacle_density)
    report, _ = evaluate(policy, scen, a.episodes, a.seed_base, cfg.sim, cfg.lidar, cfg.grid, cfg.reward,
                         cfg.eval.comfort_margin, name=a.policy, dump_dir=a.dump_traces)
    csv_text, table = export_report([report])
    if a.csv:
        with open(a.csv, "w") as fh:
            fh.write(csv_text)
    print(table, end="")
    return 0


def cmd_gen_scenario(a) -> int:
    spec = Scenario(a.kind, seed=a.seed, n_agents=a.n_agents, bounds=a.bounds, obstacle_density=a.density)
    doc = {"scenario": json.loads(spec.to_json()), "world": world_to_dict(generate_scenario(spec))}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if a.json:
        with open(a.json, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


def cmd_rollout_model(a) -> int:
    """Roll the model forward from a real state and dump predicted and real map strips."""
    cfg = _config_from_checkpoint(a.checkpoint)
    policy = load_policy(a.checkpoint, cfg)
    ens = load_ensemble(a.checkpoint, cfg)
    env = NavEnv(cfg.scenario.with_seed(a.seed), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    env.reset()
    walker = SCRIPTED["go_straight"]()
    for _ in range(a.warmup):
        if env.main_done:
            break
        env.step(act_all(env, walker))
    if env.main_done:
        raise SystemExit("episode ended during warm-up; try another seed or fewer warm-up steps")
    m = env.main_index
    obs = env.observation(m)
    rng = np.random.default_rng(a.seed)
    ro = rollout_model(ens, obs.maps[None], np.array([obs.goal_rel]), np.array([[obs.vel.v, obs.vel.w]]),
                       policy, a.horizon, rng, r_arrival=cfg.reward.r_arrival, r_collision=cfg.reward.r_collision,
                       norms=cfg.norms)
    predicted = [ro.next_maps[k, -1] for k in range(len(ro))]
    actual = []
    for k in range(len(ro)):
        if env.main_done:
            break
        acts = act_all(env, walker)
        acts[m] = Action(float(ro.action[k, 0]), float(ro.action[k, 1]))
        env.step(acts)
        actual.append(env.histories[m].stack(cfg.grid)[-1])
    os.makedirs(a.out, exist_ok=True)
    write_pgm(os.path.join(a.out, "predicted.pgm"), np.concatenate([obs.maps[-1]] + predicted, axis=1))
    write_pgm(os.path.join(a.out, "actual.pgm"), np.concatenate([obs.maps[-1]] + actual, axis=1))
    print(f"wrote {len(predicted)} predicted and {len(actual)} real frames to {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbsocnav", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="JSON config (defaults when omitted)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", action="store_true", help="model-free: disable the transition model")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy on a scenario suite")
    e.add_argument("--checkpoint")
    e.add_argument("--config")
    e.add_argument("--policy", choices=["learned", *SCRIPTED], default="learned")
    e.add_argument("--suite", choices=[k for k in SCENARIO_KINDS], required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed-base", type=int, default=0)
    e.add_argument("--n-agents", type=int)
    e.add_argument("--csv")
    e.add_argument("--dump-traces")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gen-scenario", help="generate a scenario and dump it as JSON")
    g.add_argument("--kind", choices=SCENARIO_KINDS, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-agents", type=int, default=4)
    g.add_argument("--bounds", type=float, default=10.0)
    g.add_argument("--density", type=float, default=0.05)
    g.add_argument("--json")
    g.set_defaults(fn=cmd_gen_scenario)

    r = sub.add_parser("rollout-model", help="dump model-predicted map sequences as PGM strips")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--horizon", type=int, default=5)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--warmup", type=int, default=15)
    r.set_defaults(fn=cmd_rollout_model)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return a.fn(a)


if __name__ == "__main__":
    sys.exit(main())
