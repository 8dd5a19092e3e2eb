"""Just-in-time intervention: watch the critic's value of the default chunk
and rank fresh candidates only when it jumps away from its recent average."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from elegance import ConfigError
from elegance.critic import CriticNet, q_values
from elegance.demos import Episode, Recorder
from elegance.policy import PolicyNet, sample_candidates
from elegance.seeding import derive_seed
from elegance.tasks import TaskSpec
from elegance.world import chunk_to_actions, observe, reset


class GuidanceMode(str, Enum):
    BASE_ONLY = "base_only"
    FULL_GUIDANCE = "full_guidance"
    JITI = "jiti"

    @classmethod
    def parse(cls, name: str) -> "GuidanceMode":
        aliases = {"base": cls.BASE_ONLY, "full": cls.FULL_GUIDANCE}
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"unknown guidance mode {name!r}") from None


@dataclass(frozen=True)
class JitiConfig:
    threshold: float = 0.0  # tau_jiti; not the flow time
    window_k: int = 3
    n_candidates: int = 8

    def __post_init__(self) -> None:
        if self.window_k < 2:
            raise ConfigError("window_k must be >= 2 (with k=1 the fluctuation is always zero)")
        if self.n_candidates < 2:
            raise ConfigError("n_candidates must be >= 2")
        if math.isnan(self.threshold):
            raise ConfigError("threshold must be a number")


@dataclass
class JitiState:
    window_k: int
    history: deque = field(default=None)
    steps: int = 0
    interventions: int = 0

    def __post_init__(self) -> None:
        if self.history is None:
            self.history = deque(maxlen=self.window_k)


def fluctuation(state: JitiState, q_t: float) -> tuple[float, float, JitiState]:
    """Push ``q_t`` into the window, then return ``(|q_t - mean|, mean, state)``."""
    if not math.isfinite(q_t):
        raise ConfigError("q_t must be finite")
    history = deque(state.history, maxlen=state.window_k)
    history.append(q_t)
    # summing deviations from q_t keeps a constant stream at exactly zero
    dev = sum(h - q_t for h in history) / len(history)
    return abs(dev), q_t + dev, JitiState(state.window_k, history, state.steps + 1, state.interventions)


def argmax_first(values) -> int:
    """Index of the largest value; ties go to the lowest index."""
    return int(np.argmax(np.asarray(values)))


@dataclass
class Decision:
    chunk: np.ndarray
    intervened: bool
    critic_calls: int
    record: dict


def decide(obs: np.ndarray, policy: PolicyNet, critic: CriticNet, state: JitiState, config: JitiConfig,
           seed: int) -> tuple[Decision, JitiState]:
    """One decision: value the default chunk (candidate 0) and, if the value
    fluctuates beyond the threshold, return the best of candidates 1..N."""
    default = sample_candidates(policy, obs, 1, seed, start=0)[0]
    q_t = float(q_values(critic, obs, default)[0])
    delta, mean, state = fluctuation(state, q_t)
    record = {"q_t": q_t, "mean": mean, "delta_q": delta, "intervened": False, "chosen_index": 0}
    if delta <= config.threshold:
        return Decision(default, False, 1, record), state
    cands = sample_candidates(policy, obs, config.n_candidates, seed, start=1)
    qs = q_values(critic, obs, cands)
    best = argmax_first(qs)
    state.interventions += 1
    record.update(intervened=True, chosen_index=best + 1, candidate_q=qs.tolist())
    return Decision(cands[best], True, 1 + config.n_candidates, record), state


@dataclass
class RolloutStats:
    interventions: int = 0
    critic_calls: int = 0
    decisions: int = 0

    def to_dict(self) -> dict:
        return {"interventions": self.interventions, "critic_calls": self.critic_calls,
                "decisions": self.decisions}


def rollout(task: TaskSpec, mode: GuidanceMode | str, policy: PolicyNet, critic: CriticNet | None,
            config: JitiConfig, seed: int) -> tuple[Episode, RolloutStats]:
    """Run one episode from ``reset(task, seed)``, re-deciding every K steps.

    Decision ``d`` draws its candidates from ``derive_seed(seed, "decision", d)``,
    so every mode sees the same candidate stream.
    """
    mode = GuidanceMode.parse(mode) if isinstance(mode, str) else mode
    if mode is not GuidanceMode.BASE_ONLY and critic is None:
        raise ConfigError(f"mode {mode.value} needs a critic")
    obs_dim = task.obs_dim
    if policy.obs_dim != obs_dim or (critic is not None and critic.obs_dim != obs_dim):
        raise ConfigError(f"task {task.id}: observation size {obs_dim} does not match the checkpoints")
    if critic is not None and critic.chunk_dim != policy.chunk_dim:
        raise ConfigError("policy and critic chunk sizes differ")
    rec = Recorder(task, reset(task, seed))
    stats = RolloutStats()
    jstate = JitiState(config.window_k)
    decisions: list[dict] = []
    d = 0
    while not rec.done:
        obs = observe(rec.state, task)
        dseed = derive_seed(seed, "decision", d)
        if mode is GuidanceMode.BASE_ONLY:
            chunk = sample_candidates(policy, obs, 1, dseed, start=0)[0]
            record = {"intervened": False, "chosen_index": 0}
        elif mode is GuidanceMode.FULL_GUIDANCE:
            cands = sample_candidates(policy, obs, config.n_candidates, dseed, start=1)
            qs = q_values(critic, obs, cands)
            best = argmax_first(qs)
            chunk = cands[best]
            stats.critic_calls += config.n_candidates
            stats.interventions += 1
            record = {"intervened": True, "chosen_index": best + 1, "candidate_q": qs.tolist()}
        else:
            dec, jstate = decide(obs, policy, critic, jstate, config, dseed)
            chunk, record = dec.chunk, dec.record
            stats.critic_calls += dec.critic_calls
            stats.interventions += int(dec.intervened)
        record["decision"] = d
        decisions.append(record)
        stats.decisions += 1
        for action in chunk_to_actions(chunk, task.physics):
            rec.act(action)
        d += 1
    ep = rec.episode(seed, mode.value)
    ep.decisions = decisions
    return ep, stats


def base_fluctuations(task: TaskSpec, policy: PolicyNet, critic: CriticNet, seed: int, window_k: int) -> list[float]:
    """Delta-q values a base-only rollout would feed the trigger."""
    ep, _ = rollout(task, GuidanceMode.JITI, policy, critic, JitiConfig(math.inf, window_k), seed)
    return [r["delta_q"] for r in ep.decisions]


def calibrate_threshold(tasks, policy: PolicyNet, critic: CriticNet, seeds, window_k: int,
                        percentile: float = 80.0) -> float:
    """Percentile of Delta-q over base-policy rollouts on the given seeds."""
    values = [dq for task in tasks for s in seeds for dq in base_fluctuations(task, policy, critic, s, window_k)]
    if not values:
        raise ConfigError("no calibration decisions")
    return float(np.percentile(values, percentile))


def parse_threshold(text: str) -> tuple[float | None, float | None]:
    """``"0.05"`` -> (0.05, None); ``"auto:p80"`` -> (None, 80.0); ``"inf"`` works."""
    text = str(text).strip()
    if text.startswith("auto:p"):
        try:
            p = float(text[6:])
        except ValueError:
            raise ConfigError(f"bad threshold spec {text!r}") from None
        if not 0 <= p <= 100:
            raise ConfigError("threshold percentile must be in [0, 100]")
        return None, p
    try:
        return float(text), None
    except ValueError:
        raise ConfigError(f"bad threshold spec {text!r}") from None
