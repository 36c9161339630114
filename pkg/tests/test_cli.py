import json

import pytest

from zipmerge.cli import EXIT_FAULT, EXIT_OK, EXIT_USAGE, main
from zipmerge.config import ConfigFileError, build_config, env_overrides, load_config, parse_config_text
from zipmerge.road_network import default_map, shipped_map

TINY_CONFIG = """\
# small enough for a unit test
env.max_steps = 30
env.n_other_agents_max = 2
ppo.n_envs = 1
ppo.horizon = 8
ppo.batch_size = 8
ppo.epochs = 1
obs.size = 32
obs.mpp = 2.0
arch.raster_size = 32
"""
TINY_SCHEDULE = "stage tag=RL pop=popul1 updates=1\nstage tag=SP1 pop=popul3 updates=1\n"


def test_config_file_and_env_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG + "ppo.lr = 0.01\nenv.init_vel_range = 1, 2\n")
    cfg = load_config(path, environ={"ZIPMERGE_PPO_LR": "0.001", "OTHER": "x"})
    assert cfg.ppo.lr == 0.001 and cfg.ppo.horizon == 8
    assert cfg.env.init_vel_range == (1.0, 2.0)
    assert cfg.obs.size == cfg.arch.raster_size == 32


def test_env_overrides_mapping():
    got = env_overrides({"ZIPMERGE_PPO_LEARN_FROM_ALL_CURRENT": "true", "ZIPMERGE_BOGUS": "1"})
    assert got == {"ppo.learn_from_all_current": "true"}
    assert build_config(got).ppo.learn_from_all_current is True


@pytest.mark.parametrize("text", ["ppo.lr 0.1", "nope.lr = 1", "ppo.nope = 1", "ppo.lr = fast", "ppo.lr = -1",
                                  "obs.size = 64"])
def test_config_errors(text):
    with pytest.raises(ConfigFileError):
        build_config(parse_config_text(text))


def test_shipped_maps():
    assert shipped_map("zipper_merge").lanes.keys() == default_map().lanes.keys()
    assert shipped_map("straight").lanes_with_label("A")
    with pytest.raises(FileNotFoundError):
        shipped_map("nowhere")


@pytest.mark.parametrize("argv", [[], ["fly"], ["eval", "--snapshot", "missing.snap"],
                                  ["eval", "--idm-ego", "--trials", "0"], ["eval", "--idm-ego", "--population", "SP9:1"],
                                  ["replay", "--trace", "missing.csv", "--out", "x"],
                                  ["train", "--out", "x", "--schedule", "no_such_schedule"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_corrupt_snapshot_is_a_fault(tmp_path, capsys):
    bad = tmp_path / "bad.snap"
    bad.write_bytes(b"ZMPOLICY" + b"\0" * 40)
    assert main(["eval", "--snapshot", str(bad), "--trials", "1"]) == EXIT_FAULT
    assert "fault" in capsys.readouterr().err


def test_train_eval_replay(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY_CONFIG)
    sched = tmp_path / "sched.txt"
    sched.write_text(TINY_SCHEDULE)
    out = tmp_path / "run"
    assert main(["train", "--schedule", str(sched), "--config", str(cfg), "--out", str(out), "--seed", "1"]) == EXIT_OK
    assert {p.name for p in out.iterdir()} >= {"metrics.csv", "curve.csv", "final.snap", "zoo"}
    assert (out / "curve.csv").read_text().count("\n") == 3

    report = tmp_path / "report.json"
    trace = tmp_path / "trace.csv"
    argv = ["eval", "--snapshot", str(out / "zoo" / "SP1.snap"), "--zoo", str(out / "zoo"), "--population",
            "popul3", "--trials", "2", "--config", str(cfg), "--trace", str(trace), "--json", str(report)]
    assert main(argv) == EXIT_OK
    data = json.loads(report.read_text())
    assert data["n_trials"] == 2 and data["policy_tag"] == "SP1"
    assert sum(data["counts"].values()) == 2

    frames = tmp_path / "frames"
    assert main(["replay", "--trace", str(trace), "--out", str(frames), "--size", "64"]) == EXIT_OK
    names = sorted(p.name for p in frames.iterdir())
    assert names[0].startswith("ep0000_frame_") and any(n.startswith("ep0001_") for n in names)
    assert "wrote" in capsys.readouterr().out
