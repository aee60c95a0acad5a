import json
import subprocess
import sys

import pytest

from mbsocnav.cli import main
from mbsocnav.config import Config
from mbsocnav.evaluate import parse_report
from mbsocnav.obsmap import read_pgm

from test_mbpo import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(tiny_config().to_json())
    assert main(["train", "--config", str(cfg_path), "--seed", "1", "--out", str(root / "run")]) == 0
    return root, cfg_path


def test_gen_scenario_json(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["gen-scenario", "--kind", "towards", "--seed", "3", "--n-agents", "4", "--json", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["scenario"]["kind"] == "towards" and len(doc["world"]["agents"]) == 4
    main(["gen-scenario", "--kind", "towards", "--seed", "3", "--n-agents", "4"])
    assert json.loads(capsys.readouterr().out) == doc


def test_eval_scripted_writes_csv(tmp_path, capsys):
    csv_path = tmp_path / "r.csv"
    assert main(["eval", "--policy", "go_straight", "--suite", "passing", "--episodes", "2",
                 "--seed-base", "5", "--csv", str(csv_path), "--dump-traces", str(tmp_path / "tr")]) == 0
    [rep] = parse_report(csv_path.read_text())
    assert rep.policy == "go_straight" and rep.scenario == "passing" and rep.episodes == 2
    assert "Success Rate" in capsys.readouterr().out
    assert len(list((tmp_path / "tr").glob("*.csv"))) == 2


def test_train_writes_artifacts(trained):
    root, _ = trained
    run = root / "run"
    assert (run / "checkpoint.ckpt").exists() and (run / "train_log.csv").exists()
    assert Config.load(run / "config.json") == tiny_config()


def test_eval_learned_checkpoint(trained, tmp_path):
    root, _ = trained
    csv_path = tmp_path / "l.csv"
    assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint.ckpt"), "--suite", "crossing",
                 "--episodes", "1", "--csv", str(csv_path)]) == 0
    [rep] = parse_report(csv_path.read_text())
    assert rep.policy == "learned" and 0 <= rep.ego_score <= 100


def test_rollout_model_strips(trained, tmp_path):
    root, _ = trained
    assert main(["rollout-model", "--checkpoint", str(root / "run" / "checkpoint.ckpt"), "--out", str(tmp_path),
                 "--horizon", "3", "--warmup", "2"]) == 0
    pred, real = read_pgm(tmp_path / "predicted.pgm"), read_pgm(tmp_path / "actual.pgm")
    assert pred.shape == (64, 64 * 4)
    assert real.shape[0] == 64 and real.shape[1] % 64 == 0


def test_train_ablation_flag(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(tiny_config().to_json())
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "abl"), "--ablation"]) == 0
    assert Config.load(tmp_path / "abl" / "config.json").loop.ablation
    with pytest.raises(SystemExit):
        main(["rollout-model", "--checkpoint", str(tmp_path / "abl" / "checkpoint.ckpt"), "--out", str(tmp_path)])


def test_bad_config_rejected(tmp_path):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"loop": {"E": 0}}))
    with pytest.raises(Exception):
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x")])
    assert not (tmp_path / "x").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mbsocnav.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-scenario" in out.stdout
