import hashlib
import json

import pytest

from iterppo.harness.cli import main
from iterppo.harness.config import ConfigError, canonical_json, env_overrides, load_config, parse_config
from iterppo.harness.io import (
    RunLocked,
    RunManifest,
    atomic_write,
    read_table,
    read_trajectories,
    run_lock,
    write_table,
    write_trajectories,
)
from iterppo.iterate import collect_batch
from iterppo.q_eval import build_eval_dataset

SMALL = ["--episodes", "200"]


def cli(tmp_path, *args):
    return main([*args, "--runs-dir", str(tmp_path)])


# --- config --------------------------------------------------------------------------------


def test_default_config_is_toy_shop(experiment):
    assert experiment.env.name == "toy-shop"
    assert experiment.env.mdp.vocab_size == 12 and experiment.env.mdp.max_msg_len == 2 and experiment.env.mdp.horizon_cap == 3
    assert experiment.loop.episodes == 10_000


def test_hash_is_sha256_of_canonical_bytes(experiment):
    assert experiment.hash == hashlib.sha256(canonical_json(experiment.raw)).hexdigest()


def test_env_var_overrides():
    over = env_overrides({"IPPO_LOOP__EPISODES": "500", "IPPO_SEED": "7", "IPPO_RUNS_DIR": "/x", "OTHER": "1"})
    assert over == {"loop": {"episodes": 500}, "seed": 7}
    cfg = load_config(environ={"IPPO_LOOP__PPO__KL_COEF": "0.5"})
    assert cfg.loop.ppo.kl_coef == 0.5


@pytest.mark.parametrize(
    "change",
    [
        {"format_version": 2},
        {"env": {}},
        {"surprise": 1},
        {"loop": {"episodes": -5}},
    ],
)
def test_malformed_configs(change, experiment):
    with pytest.raises(ConfigError):
        parse_config({**experiment.raw, **change})


def test_empty_config_rejected():
    with pytest.raises(ConfigError):
        parse_config({})


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad, environ={})


# --- io -------------------------------------------------------------------------------------------


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "a" / "f.txt"
    atomic_write(p, "one")
    atomic_write(p, b"two")
    assert p.read_text() == "two"
    assert [x.name for x in p.parent.iterdir()] == ["f.txt"]


def test_trajectory_log_round_trip(tmp_path, toy, pi0):
    trajs = collect_batch(toy, pi0, 30, seed=1)
    path = tmp_path / "t.jsonl"
    write_trajectories(path, trajs, build_eval_dataset(trajs, toy.mdp.discount))
    assert read_trajectories(path) == trajs
    first = json.loads(path.read_text().splitlines()[0])
    assert "returns" in first and "weights" in first


def test_table_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": None}, {"a": 2, "b": 1e-17, "c": "x"}]
    write_table(tmp_path / "t.tsv", rows)
    back = read_table(tmp_path / "t.tsv")
    assert [float(r["b"]) for r in back] == [0.1 + 0.2, 1e-17]
    assert back[0]["a"] == "1"


def test_manifest_round_trip(tmp_path):
    m = RunManifest("r", "abc", {"master": 0}, {"iterppo": "0.1.0"}, ["iter_0/record.json"])
    m.save(tmp_path)
    assert RunManifest.load(tmp_path) == m


def test_lock_rejects_second_holder(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(RunLocked):
            with run_lock(tmp_path):
                pass
    with run_lock(tmp_path):
        pass


# --- CLI --------------------------------------------------------------------------------------


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_oracle_command(tmp_path, capsys):
    assert cli(tmp_path, "oracle") == 0
    out = capsys.readouterr().out
    assert "20 states" in out and "V*(s0)=0.30075" in out
    assert (tmp_path / "default" / "mdp.json").exists()


def test_stage_commands_chain(tmp_path, capsys):
    assert cli(tmp_path, "collect", *SMALL) == 0
    assert cli(tmp_path, "fit-q", *SMALL) == 0
    assert cli(tmp_path, "ppo", *SMALL) == 0
    run = tmp_path / "default"
    for f in ("trajectories.jsonl", "q.json", "policy_ppo.json", "ppo_epochs.tsv", "config.json"):
        assert (run / f).exists()
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split(":")[0] for l in lines] == ["collect", "fit-q", "ppo"]


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert cli(tmp_path, "fit-q", "--run-id", "empty") == 2
    assert cli(tmp_path, "collect", "--policy", str(tmp_path / "nope.json")) == 2
    assert "error" in capsys.readouterr().err


def test_malformed_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"env": {"mdp": {}}}')
    assert cli(tmp_path, "oracle", "--config", str(bad)) == 2


def test_changed_config_on_existing_run_exit_2(tmp_path):
    assert cli(tmp_path, "collect", *SMALL) == 0
    assert cli(tmp_path, "collect", "--episodes", "300") == 2


def test_locked_run_exit_3(tmp_path):
    (tmp_path / "default").mkdir()
    (tmp_path / "default" / ".lock").write_text("123")
    assert cli(tmp_path, "oracle") == 3


def test_iterate_resume_continues(tmp_path, capsys):
    assert cli(tmp_path, "iterate", "--iterations", "1", *SMALL, "--run-id", "r") == 0
    assert cli(tmp_path, "iterate", "--iterations", "2", *SMALL, "--run-id", "r") == 2
    assert cli(tmp_path, "iterate", "--iterations", "2", *SMALL, "--resume", "r") == 0
    run = tmp_path / "r"
    assert (run / "iter_1" / "record.json").exists()
    rows = read_table(run / "metrics" / "iterations.tsv")
    assert [r["iteration"] for r in rows] == ["0", "1"]
    assert RunManifest.load(run).records == ["iter_0/record.json", "iter_1/record.json"]
    assert (run / "plots" / "value_vs_iteration.tsv").exists()
    # the uninterrupted run writes the same metrics
    assert cli(tmp_path, "iterate", "--iterations", "2", *SMALL, "--run-id", "s") == 0
    assert (tmp_path / "s" / "metrics" / "iterations.tsv").read_bytes() == (run / "metrics" / "iterations.tsv").read_bytes()


def test_ab_test_command(tmp_path, capsys):
    assert cli(tmp_path, "iterate", "--iterations", "1", *SMALL) == 0
    assert cli(tmp_path, "ab-test", "--episodes", "300") == 0
    rows = read_table(tmp_path / "default" / "ab.tsv")
    assert float(rows[0]["ci_low"]) <= float(rows[0]["difference"]) <= float(rows[0]["ci_high"])


def test_ab_test_needs_policy_b(tmp_path):
    assert cli(tmp_path, "ab-test", "--episodes", "300") == 2


@pytest.mark.slow
def test_verify_passes_on_shipped_config(tmp_path, capsys):
    assert cli(tmp_path, "verify", "--iterations", "2") == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 5 and "[FAIL]" not in out
