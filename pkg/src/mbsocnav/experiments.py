"""Long-running experiments behind the heavier acceptance checks, with a result cache.

Results are JSON documents cached under ``$MBSOCNAV_CACHE`` (default
``~/.cache/mbsocnav``). The key covers the experiment parameters and a hash of
the package's code with comments and docstrings stripped, so documentation
edits keep the cache while any behavioural change invalidates it.
"""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from .config import Config
from .env import GoStraightPolicy, NavEnv
from .evaluate import evaluate
from .mbpo import EnvBuffer, LoopConfig, Trainer, collect_env_step
from .sim import Scenario
from .world_model import ModelEnsemble, evaluate_pixel_mse, train_model

log = logging.getLogger(__name__)

PKG_DIR = Path(__file__).resolve().parent


# -- cache -------------------------------------------------------------------------

def _strip_docstrings(tree):
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(PKG_DIR.glob("*.py")) + sorted(PKG_DIR.glob("*.pyx")):
        if path.name in ("cli.py", "__init__.py"):
            continue
        text = path.read_text()
        h.update(path.name.encode())
        if path.suffix == ".py":
            h.update(ast.dump(_strip_docstrings(ast.parse(text))).encode())
        else:
            h.update(text.encode())
    return h.hexdigest()


def cache_dir() -> Path:
    return Path(os.environ.get("MBSOCNAV_CACHE", Path.home() / ".cache" / "mbsocnav"))


def cached(name: str, params: dict, fn):
    """Return ``fn(**params)``, reading or writing the JSON cache."""
    key = hashlib.sha256((json.dumps(params, sort_keys=True) + code_hash()).encode()).hexdigest()[:20]
    path = cache_dir() / f"{name}-{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    t0 = time.time()
    result = fn(**params)
    result["seconds"] = time.time() - t0
    result["params"] = params
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(result, indent=1))
    os.replace(tmp, path)
    return result


# -- transition model vs persistence -------------------------------------------------

class Subset:
    """Index view over a buffer exposing only ``len`` and ``model_batch``."""

    def __init__(self, buf, indices):
        self.buf, self.indices = buf, np.asarray(indices)

    def __len__(self):
        return len(self.indices)

    def model_batch(self, idx):
        return self.buf.model_batch(self.indices[np.asarray(idx)])


def crossing_dataset(n: int, seed: int, cfg: Config = Config(), sigma: float = 0.1) -> EnvBuffer:
    """Robot and one pedestrian on crossing lanes, both steered by go_straight."""
    env = NavEnv(Scenario("crossing", n_agents=2, seed=seed), cfg.sim, cfg.lidar, cfg.grid, cfg.reward)
    buf = EnvBuffer(n, cfg)
    rng = np.random.default_rng(seed)
    policy = GoStraightPolicy()
    while len(buf) < n:
        collect_env_step(env, policy, buf, sigma, rng)
    return buf


def persistence_mse(buf, indices, chunk: int = 64) -> float:
    total, count = 0.0, 0
    for s in range(0, len(indices), chunk):
        b = buf.model_batch(np.asarray(indices[s:s + chunk]))
        last = b["maps"][:, -1]
        total += float(((last - b["next_map"]) ** 2).sum())
        count += last.numel()
    return total / count


def representation_experiment(n: int = 5000, holdout: float = 0.2, steps: int = 3000, seed: int = 0) -> dict:
    """Train one transition model on crossing transitions; score held-out pixel MSE."""
    cfg = Config().with_overrides("model", ensemble_size=1, steps=steps)
    buf = crossing_dataset(n, seed, cfg)
    n_train = int(round(n * (1 - holdout)))
    test = np.arange(n_train, n)
    ens = ModelEnsemble(cfg.model, cfg.grid, cfg.sim.dt, seed=seed, size=1)
    train_model(ens, Subset(buf, np.arange(n_train)), np.random.default_rng(seed))
    model = evaluate_pixel_mse(ens.members[0], buf, test)
    base = persistence_mse(buf, test)
    return {"model_mse": model, "persistence_mse": base, "relative_gain": 1.0 - model / base,
            "n_train": n_train, "n_test": len(test)}


# -- training runs ---------------------------------------------------------------------

def reduced_config(scenario: Scenario, ablation: bool, E: int = 1000, N: int = 10, R: int = 300,
                   eval_every: int = 100, eval_episodes: int = 5) -> Config:
    """The desk-scale training setup used by the trend and end-to-end checks."""
    loop = LoopConfig(E=E, N=N, R=R, M=0 if ablation else 10, P=4, ablation=ablation, model_capacity=50_000)
    cfg = Config(scenario=scenario, loop=loop)
    cfg = cfg.with_overrides("model", ensemble_size=3, steps=200)
    return cfg.with_overrides("eval", train_every=eval_every, train_episodes=eval_episodes)


def training_curve(config: dict, seed: int) -> dict:
    tr = Trainer(Config.from_dict(config), seed)
    res = tr.run()
    return {"evals": [list(e) for e in res.evals], "env_steps": res.env_steps,
            "d_model_size": res.d_model_size}


def cached_curve(cfg: Config, seed: int) -> dict:
    return cached("curve", {"config": cfg.to_dict(), "seed": seed}, training_curve)


def first_reaching(evals, threshold: float):
    for step, value in evals:
        if value >= threshold:
            return step
    return None


def converged_value(evals, tail: int = 3) -> float:
    return float(np.mean([v for _, v in evals[-tail:]]))


def sample_efficiency(seeds=(0, 1, 2), fraction: float = 0.8, budget: float = 0.6) -> dict:
    """Compare env steps needed by model-based and model-free runs to reach a common threshold.

    The threshold per seed is ``fraction`` of the model-free run's converged
    evaluation return (mean of its last three evaluations). A non-positive
    converged value makes the threshold meaningless, so that seed fails.
    """
    scen = Scenario("static_mapless", n_agents=1)
    per_seed = []
    for seed in seeds:
        mf = cached_curve(reduced_config(scen, ablation=True), seed)
        mb = cached_curve(reduced_config(scen, ablation=False), seed)
        conv = converged_value(mf["evals"])
        row = {"seed": seed, "mf_converged": conv, "mf_evals": mf["evals"], "mb_evals": mb["evals"]}
        if conv <= 0:
            row.update(threshold=None, mf_steps=None, mb_steps=None, ratio=None, passed=False)
        else:
            thr = fraction * conv
            s_mf, s_mb = first_reaching(mf["evals"], thr), first_reaching(mb["evals"], thr)
            ratio = s_mb / s_mf if s_mf and s_mb is not None else None
            row.update(threshold=thr, mf_steps=s_mf, mb_steps=s_mb, ratio=ratio,
                       passed=ratio is not None and ratio <= budget)
        per_seed.append(row)
    return {"seeds": per_seed, "passed": sum(r["passed"] for r in per_seed) >= 2}


def social_run(seed: int = 0, episodes: int = 20, E: int = 1000, N: int = 20, R: int = 300) -> dict:
    """Train on the four-agent random scenario, then compare success against go_straight."""
    scen = Scenario("random", n_agents=4)
    cfg = reduced_config(scen, ablation=False, E=E, N=N, R=R, eval_every=500)
    tr = Trainer(cfg, seed)
    tr.run()
    ev = cfg.eval
    learned, _ = evaluate(tr.policy, scen, episodes, ev.seed_base, cfg.sim, cfg.lidar, cfg.grid, cfg.reward,
                          ev.comfort_margin, name="learned")
    straight, _ = evaluate(GoStraightPolicy(), scen, episodes, ev.seed_base, cfg.sim, cfg.lidar, cfg.grid,
                           cfg.reward, ev.comfort_margin)
    return {"learned_success": learned.success_rate, "go_straight_success": straight.success_rate,
            "gap": learned.success_rate - straight.success_rate,
            "learned": vars(learned), "go_straight": vars(straight),
            "train_evals": [list(e) for e in tr.evals]}


def cached_social_run(seed: int = 0, **kw) -> dict:
    return cached("social", {"seed": seed, **kw}, social_run)


def cached_representation(**kw) -> dict:
    return cached("representation", kw, representation_experiment)


def main(argv=None):
    """Run (and cache) the heavy experiments: ``python -m mbsocnav.experiments [representation|efficiency|social]``."""
    import argparse
    ap = argparse.ArgumentParser(description="run the cached long experiments")
    ap.add_argument("which", nargs="*", default=["representation", "efficiency", "social"])
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.which:
        if name == "representation":
            out = cached_representation()
        elif name == "efficiency":
            out = sample_efficiency()
            out = {"passed": out["passed"], "seeds": [{k: v for k, v in r.items() if not k.endswith("evals")}
                                                      for r in out["seeds"]]}
        elif name == "social":
            out = cached_social_run()
            out = {k: out[k] for k in ("learned_success", "go_straight_success", "gap")}
        else:
            ap.error(f"unknown experiment {name}")
        print(name, json.dumps(out), flush=True)


if __name__ == "__main__":
    main()
