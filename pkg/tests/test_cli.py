import json

import pytest

from elegance.cli import KEYS, config_text, main, parse_config_text, resolve
from elegance import ConfigError
from tests.conftest import TOY

FAST = ["--policy-steps", "40", "--policy-hidden", "16", "--policy-batch", "32", "--critic-steps", "20",
        "--critic-hidden", "16", "--log-interval", "10", "--n-rollouts", "2", "--n-calibration", "1",
        "--n-candidates", "3"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    tasks = root / "toy.tasks"
    tasks.write_text(TOY.replace("[task:jittered]", "[task:jittered]\nsplit = unseen").replace(
        "[task:place]", "[task:place]\nsplit = seen"))
    out = root / "out"
    common = ["--benchmark", str(tasks), "--out-dir", str(out), "--seed", "3", *FAST]
    assert main(["gen-data", *common, "--episodes", "4"]) == 0
    assert main(["train-policy", *common]) == 0
    assert main(["train-critic", *common]) == 0
    return root, out, common


def test_pipeline_outputs(run_dir):
    _, out, _ = run_dir
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tasks"] == ["place", "jittered"] and len(manifest["episodes"]) == 8
    for name in ("dataset.jsonl", "policy.json", "policy.json.meta.json", "policy_log.csv", "critic.json",
                 "critic.json.meta.json", "critic_log.csv", "gen-data.config", "train-critic.config"):
        assert (out / name).exists(), name
    assert (out / "policy_log.csv").read_text().splitlines()[0] == "step,train_loss,holdout_loss"
    assert len((out / "policy_log.csv").read_text().splitlines()) == 1 + 4


def test_gen_data_is_byte_identical(run_dir, tmp_path):
    root, out, common = run_dir
    again = tmp_path / "again"
    args = [a if a != str(out) else str(again) for a in common]
    assert main(["gen-data", *args, "--episodes", "4"]) == 0
    assert (again / "dataset.jsonl").read_bytes() == (out / "dataset.jsonl").read_bytes()
    assert (again / "episodes/place/0002.jsonl").read_bytes() == (out / "episodes/place/0002.jsonl").read_bytes()


def test_eval_and_report_determinism(run_dir, capsys):
    _, out, common = run_dir
    assert main(["eval", *common]) == 0
    first = (out / "eval.csv").read_bytes(), (out / "eval.json").read_bytes()
    assert main(["eval", *common]) == 0
    assert ((out / "eval.csv").read_bytes(), (out / "eval.json").read_bytes()) == first
    assert (out / "eval_series.csv").exists()
    assert "jiti" in capsys.readouterr().out


def test_replay_pass_and_tamper(run_dir, capsys, tmp_path):
    _, out, common = run_dir
    files = sorted(str(p) for p in (out / "episodes").rglob("*.jsonl"))
    assert main(["replay", *common, *files]) == 0
    lines = (out / "episodes/place/0000.jsonl").read_text().splitlines()
    rec = json.loads(lines[4])
    rec["state"]["gripper"][0] += 0.01
    lines[4] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["replay", *common, str(bad)]) == 3
    assert "state diverges at step 3" in capsys.readouterr().out


def test_ablate_and_generalize(run_dir, tmp_path):
    root, out, common = run_dir
    assert main(["ablate", *common]) == 0
    assert (out / "critic_binary_terminal.json").exists()
    assert json.loads((out / "reward_ablation.json").read_text())["arms"] == ["task_specific", "binary_terminal"]
    # the default critic was trained on both tasks: generalize must refuse it
    assert main(["generalize", *common]) == 1
    seen = ["--critic", str(tmp_path / "seen.json"), "--critic-tasks", "seen"]
    assert main(["train-critic", *common, *seen]) == 0
    assert main(["generalize", *common, *seen]) == 0
    assert json.loads((out / "generalization.json").read_text())["groups"]["unseen"] == ["jittered"]


def test_usage_errors(tmp_path, capsys):
    out = ["--out-dir", str(tmp_path)]
    assert main([]) == 1
    assert main(["gen-data", "--bogus", "1"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["gen-data", *out, "--config", str(tmp_path / "none.cfg")]) == 1
    (tmp_path / "bad.cfg").write_text("episodes = 3\nwidth = 9\n")
    assert main(["gen-data", *out, "--config", str(tmp_path / "bad.cfg")]) == 1
    assert "unknown config key 'width'" in capsys.readouterr().err
    assert main(["train-policy", *out]) == 1  # no manifest
    assert main(["gen-data", *out, "--episodes", "x"]) == 1


def test_numeric_failure_exit_code(run_dir, tmp_path):
    _, out, common = run_dir
    args = common + ["--policy", str(tmp_path / "p.json"), "--policy-lr", "1e9", "--policy-steps", "200"]
    assert main(["train-policy", *args]) == 2


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("ELEGANCE_OUT", str(tmp_path / "envout"))
    cfg = resolve(parse_config_text("episodes = 7  # comment\nK = 5\n"))
    assert cfg["episodes"] == 7 and cfg["K"] == 5 and cfg["out_dir"] == str(tmp_path / "envout")
    assert resolve(parse_config_text(config_text(cfg))) == cfg
    assert set(parse_config_text(config_text(cfg))) == set(KEYS)
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_default_benchmark_manifest_lists_eight_tasks(tmp_path):
    assert main(["gen-data", "--out-dir", str(tmp_path), "--episodes", "1"]) == 0
    assert len(json.loads((tmp_path / "manifest.json").read_text())["tasks"]) == 8


def test_episode_count_flag(run_dir, tmp_path):
    root, _, _ = run_dir
    assert main(["gen-data", "--benchmark", str(root / "toy.tasks"), "--out-dir", str(tmp_path),
                 "--tasks", "place", "--episodes", "10"]) == 0
    assert len(list((tmp_path / "episodes").rglob("*.jsonl"))) == 10


def test_zero_policy_steps_saves_initialisation(run_dir, tmp_path):
    from elegance.policy import FlowConfig, init_policy, load_policy
    from elegance.tasks import load_benchmark
    root, out, common = run_dir
    args = [a if a != str(out) else str(tmp_path) for a in common]
    assert main(["gen-data", *args, "--episodes", "2"]) == 0
    assert main(["train-policy", *args, "--policy-steps", "0"]) == 0
    bench = load_benchmark(root / "toy.tasks")
    init = init_policy(bench.obs_dim, 10, FlowConfig(hidden=(16,)), 3, layout=bench.layout)
    assert load_policy(tmp_path / "policy.json").net.equals(init.net)


def test_mode_columns(run_dir):
    _, out, common = run_dir
    assert main(["eval", *common, "--modes", "base_only,jiti"]) == 0
    rows = (out / "eval.csv").read_text().splitlines()[1:]
    assert sorted({r.split(",")[1] for r in rows}) == ["base_only", "jiti"]
