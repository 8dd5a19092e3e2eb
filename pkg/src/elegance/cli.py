"""Command-line pipeline: ``elegance <command> [--config FILE] [--key value ...]``.

Commands: gen-data, train-policy, train-critic, eval, ablate, generalize, replay.
Configuration is flat ``key = value`` text; flags mirror the keys and override
the file. Every command writes its resolved configuration beside its outputs.
Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from elegance import ConfigError, NumericError
from elegance.critic import (CalQLConfig, critic_meta, load_critic, save_critic, train_critic,
                             write_log as write_critic_log)
from elegance.demos import (build_dataset, episode_lines, generate_episodes, judge,
                            load_dataset, load_episode, save_dataset, save_episode)
from elegance.evaluation import (InvariantError, ablate_reward, atomic_write, generalization_split,
                                 intervention_series, run_experiment, write_series)
from elegance.policy import FlowConfig, load_policy, save_policy, train_policy
from elegance.tasks import Benchmark, load_benchmark
from elegance.world import step

log = logging.getLogger("elegance")

OUT_ENV = "ELEGANCE_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


# key -> (parser, default, help)
KEYS: dict[str, tuple] = {
    "benchmark": (str, "elegant8", "task file path or built-in name (elegant8, generalization)"),
    "tasks": (str, "", "comma-separated task ids (default: all)"),
    "seed": (int, 0, "root seed; every random stream derives from it"),
    "out_dir": (str, "", f"output directory (default: ${OUT_ENV} or ./runs)"),
    "episodes": (int, 40, "demonstrations per task"),
    "profile_mix": (str, "expert:0.45,primary_flaw:0.40,hesitant:0.15", "demo profile weights"),
    "K": (int, 10, "action chunk length"),
    "gamma": (float, 0.98, "discount"),
    "reward_mode": (str, "task_specific", "task_specific | binary_terminal"),
    "critic_stride": (int, 2, "steps between chunk starts in the critic dataset (divides K)"),
    "critic_tasks": (str, "", "restrict critic training data: task ids, or seen / unseen"),
    "euler_steps": (int, 10, "flow integration steps"),
    "policy_steps": (int, 12000, "policy optimisation steps"),
    "policy_lr": (float, 1e-3, "policy peak learning rate"),
    "policy_batch": (int, 256, "policy minibatch"),
    "policy_hidden": (_ints, (256, 256), "policy hidden widths"),
    "critic_steps": (int, 3000, "critic optimisation steps"),
    "critic_lr": (float, 1e-4, "critic learning rate"),
    "critic_batch": (int, 32, "critic minibatch"),
    "critic_hidden": (_ints, (256, 256), "critic hidden widths"),
    "lambda_cal": (float, 5.0, "calibration regulariser weight"),
    "rho": (float, 5e-3, "target soft-update rate"),
    "m_policy_samples": (int, 4, "policy samples per state in the loss"),
    "grad_clip": (float, 0.5, "critic gradient-norm clip (0 disables)"),
    "log_interval": (int, 100, "training log period"),
    "init_policy": (str, "", "start policy training from this checkpoint"),
    "init_critic": (str, "", "start critic training from this checkpoint"),
    "policy": (str, "", "policy checkpoint (default: <out_dir>/policy.json)"),
    "critic": (str, "", "critic checkpoint (default: <out_dir>/critic.json)"),
    "tau_jiti": (str, "auto:p80", "intervention threshold: a number or auto:pNN"),
    "window_k": (int, 3, "fluctuation window (>= 2)"),
    "n_candidates": (int, 8, "candidates ranked on intervention"),
    "n_calibration": (int, 5, "rollouts per task used to calibrate auto thresholds"),
    "n_rollouts": (int, 50, "rollouts per task and mode"),
    "modes": (str, "base_only,full_guidance,jiti", "guidance modes to evaluate"),
    "save_episodes": (int, 0, "1 writes every evaluation episode log"),
}


class UsageError(ConfigError):
    pass


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw!r}")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown config key {k!r}")
        out[k] = v
    return out


def resolve(raw: dict[str, str]) -> dict:
    cfg = {}
    for k, (conv, default, _) in KEYS.items():
        if k in raw:
            try:
                cfg[k] = conv(raw[k])
            except ValueError:
                raise ConfigError(f"bad value for {k}: {raw[k]!r}") from None
        else:
            cfg[k] = default
    if not cfg["out_dir"]:
        cfg["out_dir"] = os.environ.get(OUT_ENV, "runs")
    return cfg


def config_text(cfg: dict) -> str:
    lines = []
    for k in KEYS:
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def persist_config(cfg: dict, command: str) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.config"
    atomic_write(path, config_text(cfg))
    return path


def parse_mix(text: str):
    mix = []
    for part in text.split(","):
        if ":" not in part:
            raise ConfigError(f"profile_mix entries look like kind:weight, got {part!r}")
        k, w = part.split(":", 1)
        mix.append((k.strip(), float(w)))
    return tuple(mix)


def task_list(bench: Benchmark, spec: str) -> list[str]:
    spec = spec.strip()
    if not spec:
        return bench.task_ids
    if spec in ("seen", "unseen"):
        ids = [t.id for t in bench.split(spec)]
        if not ids:
            raise ConfigError(f"benchmark {bench.name} has no {spec} tasks")
        return ids
    ids = [s.strip() for s in spec.split(",") if s.strip()]
    for i in ids:
        bench.task(i)
    return ids


def _eval_tasks(cfg: dict, bench: Benchmark) -> list[str]:
    """Explicit ``tasks``, else the tasks gen-data covered, else all."""
    if cfg["tasks"]:
        return task_list(bench, cfg["tasks"])
    path = _out(cfg) / "manifest.json"
    if path.exists():
        return task_list(bench, ",".join(json.loads(path.read_text())["tasks"]))
    return bench.task_ids


def _out(cfg: dict) -> Path:
    return Path(cfg["out_dir"])


def _policy_path(cfg: dict) -> Path:
    return Path(cfg["policy"]) if cfg["policy"] else _out(cfg) / "policy.json"


def _critic_path(cfg: dict) -> Path:
    return Path(cfg["critic"]) if cfg["critic"] else _out(cfg) / "critic.json"


def _manifest(cfg: dict) -> dict:
    path = _out(cfg) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"missing dataset manifest {path} (run gen-data first)")
    return json.loads(path.read_text())


def _load_episodes(cfg: dict, bench: Benchmark, manifest: dict, task_ids=None):
    eps = []
    for rel in manifest["episodes"]:
        tid = rel.split("/")[1]
        if task_ids is not None and tid not in task_ids:
            continue
        path = _out(cfg) / rel
        if not path.exists():
            raise ConfigError(f"missing episode file {path}")
        eps.append(load_episode(path, bench.task(tid)))
    return eps


# -- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    bench = load_benchmark(cfg["benchmark"])
    ids = task_list(bench, cfg["tasks"])
    eps = generate_episodes(bench, cfg["episodes"], cfg["seed"], parse_mix(cfg["profile_mix"]), ids)
    out = _out(cfg)
    rels = []
    for ep in eps:
        idx = sum(1 for r in rels if r.split("/")[1] == ep.task_id)
        rel = f"episodes/{ep.task_id}/{idx:04d}.jsonl"
        (out / "episodes" / ep.task_id).mkdir(parents=True, exist_ok=True)
        atomic_write(out / rel, "\n".join(episode_lines(ep)) + "\n")
        rels.append(rel)
    ds = build_dataset(eps, bench, cfg["K"], cfg["reward_mode"], cfg["gamma"], stride=cfg["critic_stride"])
    save_dataset(ds, out / "dataset.jsonl")
    manifest = {"benchmark": bench.name, "benchmark_hash": bench.source_hash, "tasks": ids,
                "episodes": rels, "dataset": "dataset.jsonl", "transitions": len(ds),
                "reward_mode": cfg["reward_mode"], "K": cfg["K"], "seed": cfg["seed"]}
    atomic_write(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(eps)} episodes and {len(ds)} transitions for {len(ids)} tasks to {out}")
    return EXIT_OK


def _write_policy_log(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "holdout_loss"])
        for r in rows:
            w.writerow([r["step"], repr(r["train_loss"]), "" if r["holdout_loss"] is None else repr(r["holdout_loss"])])


def cmd_train_policy(cfg: dict) -> int:
    bench = load_benchmark(cfg["benchmark"])
    manifest = _manifest(cfg)
    eps = _load_episodes(cfg, bench, manifest)
    data = build_dataset(eps, bench, cfg["K"], "task_specific", cfg["gamma"], stride=1)
    fc = FlowConfig(euler_steps=cfg["euler_steps"], hidden=cfg["policy_hidden"], batch_size=cfg["policy_batch"],
                    steps=cfg["policy_steps"], lr=cfg["policy_lr"], log_interval=cfg["log_interval"])
    init = load_policy(cfg["init_policy"]) if cfg["init_policy"] else None
    policy = train_policy(data, fc, cfg["seed"], init=init, K=cfg["K"], layout=bench.layout)
    path = _policy_path(cfg)
    save_policy(policy, path)
    _write_policy_log(policy.log, _out(cfg) / "policy_log.csv")
    print(f"policy checkpoint {path} ({len(data)} chunk pairs, {cfg['policy_steps']} steps)")
    return EXIT_OK


def _calql(cfg: dict) -> CalQLConfig:
    return CalQLConfig(gamma=cfg["gamma"], lambda_cal=cfg["lambda_cal"], rho=cfg["rho"],
                       m_policy_samples=cfg["m_policy_samples"], batch_size=cfg["critic_batch"],
                       steps=cfg["critic_steps"], lr=cfg["critic_lr"], grad_clip=cfg["grad_clip"],
                       hidden=cfg["critic_hidden"], log_interval=cfg["log_interval"])


def _critic_data(cfg: dict, bench: Benchmark, reward_mode: str):
    manifest = _manifest(cfg)
    ids = task_list(bench, cfg["critic_tasks"]) if cfg["critic_tasks"] else manifest["tasks"]
    if reward_mode == manifest["reward_mode"] and set(ids) == set(manifest["tasks"]) \
            and cfg["K"] == manifest["K"] and (_out(cfg) / manifest["dataset"]).exists():
        return load_dataset(_out(cfg) / manifest["dataset"]), ids
    eps = _load_episodes(cfg, bench, manifest, set(ids))
    return build_dataset(eps, bench, cfg["K"], reward_mode, cfg["gamma"], stride=cfg["critic_stride"]), ids


def _train_one_critic(cfg: dict, bench: Benchmark, reward_mode: str, path: Path, log_path: Path):
    policy = load_policy(_policy_path(cfg))
    data, ids = _critic_data(cfg, bench, reward_mode)
    init = load_critic(cfg["init_critic"]) if cfg["init_critic"] else None
    res = train_critic(data, policy, _calql(cfg), cfg["seed"], init=init)
    save_critic(res.critic, path, res.target, training_tasks=data.task_ids)
    write_critic_log(res.log, log_path)
    return res, data


def cmd_train_critic(cfg: dict) -> int:
    bench = load_benchmark(cfg["benchmark"])
    path = _critic_path(cfg)
    res, data = _train_one_critic(cfg, bench, cfg["reward_mode"], path, _out(cfg) / "critic_log.csv")
    print(f"critic checkpoint {path} ({len(data)} transitions, tasks {','.join(data.task_ids)})")
    return EXIT_OK


def _episode_saver(cfg: dict, sub: str):
    if not cfg["save_episodes"]:
        return None
    root = _out(cfg) / sub

    def save(arm: str, ep, stats) -> None:
        d = root / arm / ep.task_id
        d.mkdir(parents=True, exist_ok=True)
        save_episode(ep, d / f"{ep.seed}.jsonl")
    return save


def _modes(cfg: dict) -> list[str]:
    return [m.strip() for m in cfg["modes"].split(",") if m.strip()]


def _print_report(report) -> None:
    for arm, s in report.summary().items():
        extra = " ".join(f"{k}={v:.1f}" for k, v in s.items() if k.startswith("average_esr_"))
        print(f"{arm:>16}: ESR {s['average_esr']:.1f}  interventions {s['interventions']}  "
              f"critic calls {s['critic_calls']} {extra}".rstrip())


def cmd_eval(cfg: dict) -> int:
    bench = load_benchmark(cfg["benchmark"])
    ids = _eval_tasks(cfg, bench)
    policy = load_policy(_policy_path(cfg))
    modes = _modes(cfg)
    critic = load_critic(_critic_path(cfg)) if any(m not in ("base", "base_only") for m in modes) else None
    report = run_experiment(bench.subset(ids), modes, policy, critic, cfg["n_rollouts"], cfg["seed"],
                            cfg["tau_jiti"], cfg["window_k"], cfg["n_candidates"], cfg["n_calibration"],
                            extra={"config": config_text(cfg)}, on_episode=_episode_saver(cfg, "eval_episodes"),
                            name="eval")
    report.write(_out(cfg))
    write_series(_out(cfg) / "eval_series.csv", intervention_series(report))
    _print_report(report)
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    bench = load_benchmark(cfg["benchmark"])
    ids = _eval_tasks(cfg, bench)
    policy = load_policy(_policy_path(cfg))
    critics, arm_cfgs = {}, {}
    for mode in ("task_specific", "binary_terminal"):
        path = _out(cfg) / f"critic_{mode}.json"
        if not path.exists():
            _train_one_critic(cfg, bench, mode, path, _out(cfg) / f"critic_{mode}_log.csv")
        critics[mode] = load_critic(path)
        arm = {k: v for k, v in _calql(cfg).__dict__.items()}
        arm["hidden"] = list(arm["hidden"])
        arm.update(seed=cfg["seed"], reward_mode=mode,
                   training_tasks=critic_meta(path).get("training_tasks"))
        arm_cfgs[mode] = arm
    report = ablate_reward(bench.subset(ids), policy, critics, arm_cfgs, cfg["n_rollouts"], cfg["seed"],
                           cfg["tau_jiti"], cfg["window_k"], cfg["n_candidates"], cfg["n_calibration"],
                           on_episode=_episode_saver(cfg, "ablate_episodes"))
    report.write(_out(cfg))
    _print_report(report)
    return EXIT_OK


def cmd_generalize(cfg: dict) -> int:
    bench = load_benchmark(cfg["benchmark"])
    policy = load_policy(_policy_path(cfg))
    path = _critic_path(cfg)
    critic = load_critic(path)
    trained_on = critic_meta(path).get("training_tasks")
    if trained_on is None:
        raise ConfigError(f"critic {path} does not record its training tasks; cannot audit leakage")
    report = generalization_split(bench, policy, critic, trained_on, cfg["n_rollouts"], cfg["seed"],
                                  cfg["tau_jiti"], cfg["window_k"], cfg["n_candidates"], cfg["n_calibration"],
                                  on_episode=_episode_saver(cfg, "generalize_episodes"))
    report.write(_out(cfg))
    _print_report(report)
    return EXIT_OK


def replay_episode(path: str | Path, bench: Benchmark) -> tuple[bool, str]:
    """Re-simulate a logged episode; (ok, message naming the first divergence)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"episode log not found: {path}")
    hdr = json.loads(path.read_text().splitlines()[0])
    task = bench.task(hdr["task"])
    ep = load_episode(path, task)
    state = ep.states[0]
    for i, action in enumerate(ep.actions):
        state, events = step(state, action, task.physics)
        if state != ep.states[i + 1]:
            return False, f"FAIL: state diverges at step {i}"
        if events != ep.events[i]:
            return False, f"FAIL: events diverge at step {i}"
    success, elegant = judge(task, ep.states, ep.events)
    if (success, elegant) != (ep.success, ep.elegant):
        return False, (f"FAIL: predicate verdicts (success={success}, elegant={elegant}) disagree with the "
                       f"log (success={ep.success}, elegant={ep.elegant})")
    return True, f"PASS: {len(ep.actions)} steps, success={success}, elegant={elegant}"


def cmd_replay(cfg: dict, files: list[str]) -> int:
    if not files:
        raise UsageError("replay needs at least one episode file")
    bench = load_benchmark(cfg["benchmark"])
    failed = 0
    for f in files:
        ok, msg = replay_episode(f, bench)
        print(f"{f}: {msg}")
        failed += not ok
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-policy": cmd_train_policy, "train-critic": cmd_train_critic,
            "eval": cmd_eval, "ablate": cmd_ablate, "generalize": cmd_generalize}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elegance", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in [*COMMANDS, "replay"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value configuration file")
        for k, (_, default, help_) in KEYS.items():
            sp.add_argument(f"--{k.replace('_', '-')}", dest=k, default=None, help=f"{help_} [{default}]")
        if name == "replay":
            sp.add_argument("files", nargs="*", help="episode logs to verify")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("no command given (try --help)")
        raw = {}
        if args.config:
            cpath = Path(args.config)
            if not cpath.exists():
                raise ConfigError(f"config file not found: {cpath}")
            raw.update(parse_config_text(cpath.read_text(), str(cpath)))
        raw.update({k: v for k in KEYS if (v := getattr(args, k)) is not None})
        cfg = resolve(raw)
        persist_config(cfg, args.command)
        if args.command == "replay":
            return cmd_replay(cfg, args.files)
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
