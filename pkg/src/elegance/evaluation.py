"""Experiment harness: paired-seed rollouts per (task, arm), elegant success
rates, and reproducible CSV/JSON reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from elegance import ConfigError
from elegance.critic import CriticNet, critic_to_dict
from elegance.jiti import GuidanceMode, JitiConfig, calibrate_threshold, parse_threshold, rollout
from elegance.policy import PolicyNet, policy_to_dict
from elegance.seeding import derive_seed
from elegance.tasks import Benchmark, TaskSpec

log = logging.getLogger(__name__)

CSV_FIELDS = ("task", "mode", "n", "esr", "success_rate", "interventions", "critic_calls", "decisions")


class InvariantError(AssertionError):
    """A rollout outcome broke a hard harness invariant."""


@dataclass(frozen=True)
class EpisodeOutcome:
    task: str
    seed: int
    mode: str
    success: bool
    elegant: bool
    interventions: int
    critic_calls: int
    decisions: int
    length: int

    def __post_init__(self) -> None:
        if self.elegant and not self.success:
            raise InvariantError(f"{self.task} seed {self.seed}: elegant outcome without success")


def esr(outcomes: list[EpisodeOutcome]) -> float:
    """Percentage of elegant successes."""
    if not outcomes:
        raise ConfigError("ESR of an empty outcome list")
    return 100.0 * sum(o.elegant for o in outcomes) / len(outcomes)


def content_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def policy_hash(policy: PolicyNet) -> str:
    return content_hash(policy_to_dict(policy))


def critic_hash(critic: CriticNet) -> str:
    return content_hash(critic_to_dict(critic))


@dataclass
class Arm:
    """One column of a report: a guidance mode with its critic and trigger."""

    name: str
    mode: GuidanceMode
    critic: CriticNet | None = None
    config: JitiConfig = field(default_factory=JitiConfig)


@dataclass
class ExperimentReport:
    name: str
    arms: list[str]
    tasks: list[str]
    n_rollouts: int
    seed: int
    outcomes: list[EpisodeOutcome]
    fingerprint: dict
    groups: dict[str, list[str]] = field(default_factory=dict)

    def cell(self, task: str, arm: str) -> list[EpisodeOutcome]:
        return [o for o in self.outcomes if o.task == task and o.mode == arm]

    def check(self) -> None:
        for t in self.tasks:
            for a in self.arms:
                n = len(self.cell(t, a))
                if n != self.n_rollouts:
                    raise InvariantError(f"cell ({t}, {a}) has {n} rollouts, expected {self.n_rollouts}")

    def esr(self, task: str, arm: str) -> float:
        return esr(self.cell(task, arm))

    def average_esr(self, arm: str, tasks: Iterable[str] | None = None) -> float:
        tasks = list(self.tasks if tasks is None else tasks)
        return float(np.mean([self.esr(t, arm) for t in tasks]))

    def total(self, arm: str, key: str, tasks: Iterable[str] | None = None) -> int:
        tasks = set(self.tasks if tasks is None else tasks)
        return sum(getattr(o, key) for o in self.outcomes if o.mode == arm and o.task in tasks)

    def rows(self) -> list[dict]:
        out = []
        for t in self.tasks:
            for a in self.arms:
                cell = self.cell(t, a)
                out.append({"task": t, "mode": a, "n": len(cell), "esr": esr(cell),
                            "success_rate": 100.0 * sum(o.success for o in cell) / len(cell),
                            "interventions": sum(o.interventions for o in cell),
                            "critic_calls": sum(o.critic_calls for o in cell),
                            "decisions": sum(o.decisions for o in cell)})
        return out

    def summary(self) -> dict:
        out = {}
        for a in self.arms:
            entry = {"average_esr": self.average_esr(a), "interventions": self.total(a, "interventions"),
                     "critic_calls": self.total(a, "critic_calls"), "decisions": self.total(a, "decisions")}
            for g, tasks in self.groups.items():
                entry[f"average_esr_{g}"] = self.average_esr(a, tasks)
            out[a] = entry
        return out

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def json_text(self) -> str:
        doc = {"name": self.name, "arms": self.arms, "tasks": self.tasks, "n_rollouts": self.n_rollouts,
               "seed": self.seed, "groups": self.groups, "fingerprint": self.fingerprint,
               "summary": self.summary(), "rows": self.rows(),
               "outcomes": [asdict(o) for o in self.outcomes]}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        atomic_write(csv_path, self.csv_text())
        atomic_write(json_path, self.json_text())
        return csv_path, json_path


def atomic_write(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rollout_seed(seed: int, i: int) -> int:
    return seed + i


def run_arms(tasks: list[TaskSpec], arms: list[Arm], policy: PolicyNet, n_rollouts: int, seed: int,
             on_episode: Callable | None = None) -> list[EpisodeOutcome]:
    """Every arm runs on the same ``(task, seed + i)`` pairs."""
    if n_rollouts < 1:
        raise ConfigError("n_rollouts must be >= 1")
    if len({a.name for a in arms}) != len(arms):
        raise ConfigError("arm names must be unique")
    outcomes = []
    for task in tasks:
        for arm in arms:
            for i in range(n_rollouts):
                s = rollout_seed(seed, i)
                ep, stats = rollout(task, arm.mode, policy, arm.critic, arm.config, s)
                outcomes.append(EpisodeOutcome(task.id, s, arm.name, ep.success, ep.elegant, stats.interventions,
                                               stats.critic_calls, stats.decisions, len(ep)))
                if on_episode is not None:
                    on_episode(arm.name, ep, stats)
    return outcomes


def calibration_seeds(seed: int, n: int) -> list[int]:
    """Held-out seeds for threshold calibration, disjoint in practice from ``seed + i``."""
    return [derive_seed(seed, "calibration", i) for i in range(n)]


def resolve_threshold(spec, tasks: list[TaskSpec], policy: PolicyNet, critic: CriticNet, window_k: int,
                      seed: int, n_calibration: int = 5) -> float:
    """A number passes through; ``auto:pNN`` is the NN-th percentile of the
    fluctuation over base-policy rollouts on held-out calibration seeds."""
    if isinstance(spec, (int, float)):
        return float(spec)
    value, pct = parse_threshold(spec)
    if value is not None:
        return value
    return calibrate_threshold(tasks, policy, critic, calibration_seeds(seed, n_calibration), window_k, pct)


def _fingerprint(benchmark: Benchmark, policy: PolicyNet, critics: dict[str, CriticNet | None], seed: int,
                 n_rollouts: int, configs: dict[str, JitiConfig], extra: dict | None) -> dict:
    fp = {"benchmark": benchmark.name, "benchmark_hash": benchmark.source_hash, "seed": seed,
          "n_rollouts": n_rollouts, "policy_hash": policy_hash(policy),
          "critic_hashes": {k: (critic_hash(c) if c is not None else None) for k, c in critics.items()},
          "jiti": {k: {"threshold": _num(c.threshold), "window_k": c.window_k, "n_candidates": c.n_candidates}
                   for k, c in configs.items()}}
    if extra:
        fp["extra"] = extra
    return fp


def _num(x: float):
    return x if math.isfinite(x) else repr(x)


def run_experiment(benchmark: Benchmark, modes, policy: PolicyNet, critic: CriticNet | None,
                   n_rollouts: int, seed: int, threshold="auto:p80", window_k: int = 3, n_candidates: int = 8,
                   n_calibration: int = 5, extra: dict | None = None, on_episode=None,
                   name: str = "experiment") -> ExperimentReport:
    """Base vs. full guidance vs. JITI on every task of the benchmark."""
    modes = [GuidanceMode.parse(m) if isinstance(m, str) else m for m in modes]
    if not modes:
        raise ConfigError("no modes requested")
    needs_critic = any(m is not GuidanceMode.BASE_ONLY for m in modes)
    if needs_critic and critic is None:
        raise ConfigError("guided modes need a critic checkpoint")
    tasks = list(benchmark.tasks)
    thr = math.inf
    if GuidanceMode.JITI in modes:
        thr = resolve_threshold(threshold, tasks, policy, critic, window_k, seed, n_calibration)
    cfg = JitiConfig(thr, window_k, n_candidates)
    arms = [Arm(m.value, m, critic if m is not GuidanceMode.BASE_ONLY else None, cfg) for m in modes]
    outcomes = run_arms(tasks, arms, policy, n_rollouts, seed, on_episode)
    fp = _fingerprint(benchmark, policy, {"critic": critic}, seed, n_rollouts, {"all": cfg},
                      {"threshold_spec": str(threshold), **(extra or {})})
    report = ExperimentReport(name, [a.name for a in arms], [t.id for t in tasks], n_rollouts, seed, outcomes, fp)
    report.check()
    return report


def ablate_reward(benchmark: Benchmark, policy: PolicyNet, critics: dict[str, CriticNet],
                  arm_configs: dict[str, dict], n_rollouts: int, seed: int, threshold="auto:p80",
                  window_k: int = 3, n_candidates: int = 8, n_calibration: int = 5,
                  on_episode=None) -> ExperimentReport:
    """JITI with a critic per reward formulation, on identical policy and seeds.

    ``arm_configs`` describe how each critic was trained; they must agree on
    everything except ``reward_mode``. A percentile threshold is resolved per
    arm by the same rule on the same calibration seeds.
    """
    if sorted(critics) != ["binary_terminal", "task_specific"] or sorted(arm_configs) != sorted(critics):
        raise ConfigError("reward ablation needs exactly the task_specific and binary_terminal arms")
    stripped = [{k: v for k, v in arm_configs[a].items() if k != "reward_mode"} for a in sorted(arm_configs)]
    if stripped[0] != stripped[1]:
        diff = sorted(k for k in set(stripped[0]) | set(stripped[1]) if stripped[0].get(k) != stripped[1].get(k))
        raise ConfigError(f"ablation arms differ beyond reward_mode: {diff}")
    for a, c in arm_configs.items():
        if c.get("reward_mode", a) != a:
            raise ConfigError(f"arm {a} was trained with reward_mode={c.get('reward_mode')}")
    tasks = list(benchmark.tasks)
    arms, cfgs = [], {}
    for a in ("task_specific", "binary_terminal"):
        thr = resolve_threshold(threshold, tasks, policy, critics[a], window_k, seed, n_calibration)
        cfgs[a] = JitiConfig(thr, window_k, n_candidates)
        arms.append(Arm(a, GuidanceMode.JITI, critics[a], cfgs[a]))
    outcomes = run_arms(tasks, arms, policy, n_rollouts, seed, on_episode)
    fp = _fingerprint(benchmark, policy, critics, seed, n_rollouts, cfgs,
                      {"threshold_spec": str(threshold), "arm_configs": arm_configs})
    report = ExperimentReport("reward_ablation", [a.name for a in arms], [t.id for t in tasks], n_rollouts,
                              seed, outcomes, fp)
    report.check()
    return report


def check_leakage(unseen_ids: Iterable[str], training_task_ids: Iterable[str]) -> None:
    leaked = sorted(set(unseen_ids) & set(training_task_ids))
    if leaked:
        raise ConfigError(f"critic training data contains unseen tasks: {leaked}")


def generalization_split(benchmark: Benchmark, policy: PolicyNet, critic: CriticNet,
                         critic_training_tasks: Iterable[str], n_rollouts: int, seed: int, threshold="auto:p80",
                         window_k: int = 3, n_candidates: int = 8, n_calibration: int = 5,
                         on_episode=None) -> ExperimentReport:
    """Base vs. JITI on the seen and unseen splits; the threshold is
    calibrated on seen tasks only."""
    seen, unseen = benchmark.split("seen"), benchmark.split("unseen")
    if not seen or not unseen:
        raise ConfigError("benchmark needs both seen and unseen tasks")
    training = list(critic_training_tasks)
    check_leakage([t.id for t in unseen], training)
    thr = resolve_threshold(threshold, seen, policy, critic, window_k, seed, n_calibration)
    cfg = JitiConfig(thr, window_k, n_candidates)
    arms = [Arm("base_only", GuidanceMode.BASE_ONLY, None, cfg), Arm("jiti", GuidanceMode.JITI, critic, cfg)]
    tasks = seen + unseen
    outcomes = run_arms(tasks, arms, policy, n_rollouts, seed, on_episode)
    fp = _fingerprint(benchmark, policy, {"critic": critic}, seed, n_rollouts, {"all": cfg},
                      {"threshold_spec": str(threshold), "critic_training_tasks": sorted(training)})
    report = ExperimentReport("generalization", [a.name for a in arms], [t.id for t in tasks], n_rollouts, seed,
                              outcomes, fp, groups={"seen": [t.id for t in seen], "unseen": [t.id for t in unseen]})
    report.check()
    return report


def write_series(path: str | Path, series: dict[str, list[tuple[float, float]]]) -> None:
    """Plot data as long-form CSV: series, x, y."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "x", "y"])
    for name in series:
        for x, y in series[name]:
            w.writerow([name, repr(float(x)), repr(float(y))])
    atomic_write(path, buf.getvalue())


def intervention_series(report: ExperimentReport) -> dict[str, list[tuple[float, float]]]:
    """Per arm: (task index, ESR) and (task index, interventions per decision)."""
    out = {}
    for a in report.arms:
        out[f"{a}:esr"] = [(i, report.esr(t, a)) for i, t in enumerate(report.tasks)]
        rates = []
        for i, t in enumerate(report.tasks):
            cell = report.cell(t, a)
            dec = sum(o.decisions for o in cell)
            rates.append((i, sum(o.interventions for o in cell) / dec if dec else 0.0))
        out[f"{a}:intervention_rate"] = rates
    return out
