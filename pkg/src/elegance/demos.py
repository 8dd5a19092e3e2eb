"""Scripted mixed-quality demonstrations, the window annotation oracle, and
chunked transition datasets."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from elegance import ConfigError
from elegance.itcdsl import EvalContext, evaluate
from elegance.seeding import derive_seed, rng_for
from elegance.tasks import Benchmark, TaskSpec
from elegance.world import (ACTION_DIM, Action, StepEvents, WorldState, observe, reset, step,
                            wrap_angle)

log = logging.getLogger(__name__)

PROFILE_KINDS = ("expert", "premature_release", "sloppy_placement", "misaligned", "collision_prone", "hesitant")
# ITC family each flawed profile is designed to break
TARGETED_DIMENSION = {
    "premature_release": "sequence_integrity",
    "hesitant": "sequence_integrity",
    "sloppy_placement": "pose_accuracy",
    "misaligned": "pose_alignment",
    "collision_prone": "collision_free",
}
PRIMARY_FLAW = {
    "sequence_integrity": "premature_release",
    "pose_accuracy": "sloppy_placement",
    "pose_alignment": "misaligned",
    "collision_free": "collision_prone",
}
WINDOW = 25
CLOSE_DISTANCE = 0.08
REWARD_MODES = ("task_specific", "binary_terminal")


@dataclass(frozen=True)
class DemoProfile:
    kind: str
    noise: float = 0.003
    # (lo, hi) ranges for the injected flaw, sampled per episode
    release_gap: tuple[float, float] = (0.04, 0.12)
    placement_offset: tuple[float, float] = (0.035, 0.065)
    angle_error: tuple[float, float] = (0.35, 0.7)
    graze_depth: tuple[float, float] = (0.2, 0.7)
    pause_steps: tuple[int, int] = (2, 4)
    fumble_prob: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in PROFILE_KINDS:
            raise ConfigError(f"unknown demo profile {self.kind!r}")
        if self.noise < 0:
            raise ConfigError("noise scale must be non-negative")


@dataclass
class Episode:
    task_id: str
    seed: int
    profile: str
    states: list[WorldState]
    actions: list[Action]
    events: list[StepEvents]
    observations: list[np.ndarray]
    success: bool = False
    elegant: bool = False
    decisions: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self):
        """(observation, action, state after the step, events) per step."""
        return list(zip(self.observations[:-1], self.actions, self.states[1:], self.events))

    def context(self, task: TaskSpec) -> EvalContext:
        return EvalContext(self.states, self.events, task.target_object)


def judge(task: TaskSpec, states: list[WorldState], events: list[StepEvents]) -> tuple[bool, bool]:
    """(success, elegant) for a trajectory; elegant requires success."""
    ctx = EvalContext(states, events, task.target_object)
    success = evaluate(task.success_expr, ctx)
    return success, success and evaluate(task.elegance_expr, ctx)


def is_terminal(task: TaskSpec, states: list[WorldState], events: list[StepEvents]) -> bool:
    """Task object released and the success condition holds."""
    if states[-1].obj(task.target_object).held or not events:
        return False
    return evaluate(task.success_expr, EvalContext(states, events, task.target_object))


class Recorder:
    def __init__(self, task: TaskSpec, state: WorldState):
        self.task = task
        self.states, self.actions, self.events = [state], [], []
        self.done = False

    @property
    def state(self) -> WorldState:
        return self.states[-1]

    def act(self, action: Action) -> None:
        if self.done:
            return
        nxt, ev = step(self.state, action, self.task.physics)
        self.states.append(nxt)
        self.actions.append(action)
        self.events.append(ev)
        if len(self.actions) >= self.task.horizon or is_terminal(self.task, self.states, self.events):
            self.done = True

    def episode(self, seed: int, profile: str) -> Episode:
        obs = [observe(s, self.task) for s in self.states]
        success, elegant = judge(self.task, self.states, self.events)
        return Episode(self.task.id, seed, profile, self.states, self.actions, self.events, obs, success, elegant)


def _tool_point(state: WorldState) -> tuple[float, float]:
    held = state.held_object()
    return (held.x, held.y) if held is not None else (state.gripper.x, state.gripper.y)


def _move(rec: Recorder, rng, noise: float, tx: float, ty: float, grip: float,
          angle: float | None = None, tol: float = 0.008, max_steps: int = 40) -> None:
    """Drive the tool point (held object, else gripper) to (tx, ty), optionally
    turning the held object toward ``angle``."""
    phys = rec.task.physics
    for _ in range(max_steps):
        if rec.done:
            return
        x, y = _tool_point(rec.state)
        held = rec.state.held_object()
        dang = 0.0
        if angle is not None and held is not None:
            dang = max(-phys.dangle_max, min(phys.dangle_max, wrap_angle(angle - held.angle)))
        ang_ok = angle is None or held is None or abs(wrap_angle(angle - held.angle)) < 0.03
        if abs(tx - x) < tol and abs(ty - y) < tol and ang_ok:
            return
        dx = max(-phys.a_max, min(phys.a_max, tx - x)) + noise * rng.standard_normal()
        dy = max(-phys.a_max, min(phys.a_max, ty - y)) + noise * rng.standard_normal()
        dang += 2.0 * noise * rng.standard_normal() if held is not None else 0.0
        rec.act(Action(dx, dy, dang, grip))


def _reach(rec: Recorder, rng, noise: float, oid: str, max_steps: int = 60) -> None:
    """Approach with the gripper open, closing inside ``CLOSE_DISTANCE`` so the
    grasp engages on arrival; reopens if it drifts back out."""
    phys = rec.task.physics
    for _ in range(max_steps):
        if rec.done or rec.state.held_object() is not None:
            return
        g, o = rec.state.gripper, rec.state.obj(oid)
        grip = 1.0 if math.hypot(o.x - g.x, o.y - g.y) < CLOSE_DISTANCE else -1.0
        dx = max(-phys.a_max, min(phys.a_max, o.x - g.x)) + noise * rng.standard_normal()
        dy = max(-phys.a_max, min(phys.a_max, o.y - g.y)) + noise * rng.standard_normal()
        rec.act(Action(dx, dy, 0.0, grip))


def _hold(rec: Recorder, n: int, grip: float) -> None:
    for _ in range(n):
        rec.act(Action(0.0, 0.0, 0.0, grip))


def generate_demo(task: TaskSpec, profile: DemoProfile, seed: int) -> Episode:
    """Waypoint controller: reach, grasp, lift, transport, lower, release, with
    the profile's flaw injected."""
    rng = rng_for(seed, "demo", task.id, profile.kind)
    rec = Recorder(task, reset(task, seed))
    kind, noise = profile.kind, profile.noise
    s0 = rec.state
    obj = s0.obj(task.target_object)
    region = s0.region(task.target_region)
    carry = task.carry_height
    place_x, place_y = region.x, region.y
    angle = task.target_angle

    if kind == "sloppy_placement":
        place_x += rng.choice([-1.0, 1.0]) * rng.uniform(*profile.placement_offset)
    if kind == "misaligned" and angle is not None:
        angle = angle + rng.choice([-1.0, 1.0]) * rng.uniform(*profile.angle_error)
    if kind == "collision_prone":
        others = [o for o in s0.objects if o.id != obj.id]
        if others:
            carry = max(o.y + rng.uniform(*profile.graze_depth) * (o.radius + obj.radius) for o in others)
        else:
            carry = max(obj.y, place_y) + 0.04

    if rng.uniform() < profile.fumble_prob:
        # missed grasp: close short of the object and lift empty before recovering
        ang = rng.uniform(0.0, 2.0 * math.pi)
        gap = rng.uniform(0.05, 0.09)
        _move(rec, rng, noise, obj.x + gap * math.cos(ang), max(obj.y, obj.y + gap * math.sin(ang)), grip=-1.0)
        _hold(rec, 1, 1.0)
        _move(rec, rng, noise, rec.state.gripper.x, rec.state.gripper.y + rng.uniform(0.04, 0.12), grip=1.0)
    _reach(rec, rng, noise, obj.id)
    _move(rec, rng, noise, obj.x, carry, grip=1.0)
    if kind == "hesitant":
        frac = rng.uniform(0.3, 0.7)
        _move(rec, rng, noise, obj.x + frac * (place_x - obj.x), carry, grip=1.0, angle=angle)
        _hold(rec, int(rng.integers(profile.pause_steps[0], profile.pause_steps[1] + 1)), 1.0)
        rec.act(Action(0.0, 0.0, 0.0, -1.0))
        _hold(rec, 2, 0.0)
        rec.act(Action(0.0, 0.0, 0.0, 1.0))
    _move(rec, rng, noise, place_x, carry, grip=1.0, angle=angle)
    if kind == "premature_release":
        top = region.y + (region.hy if region.kind != "obstacle" else region.radius)
        release_y = min(carry, top + rng.uniform(*profile.release_gap))
        _move(rec, rng, noise, place_x, release_y, grip=1.0, angle=angle)
    else:
        _move(rec, rng, noise, place_x, place_y, grip=1.0, angle=angle)
    rec.act(Action(0.0, 0.0, 0.0, -1.0))
    _move(rec, rng, noise, place_x, place_y + 0.12, grip=-1.0)
    return rec.episode(seed, kind)


DEFAULT_MIX = (("expert", 0.45), ("primary_flaw", 0.40), ("hesitant", 0.15))


def profile_for(task: TaskSpec, rng: np.random.Generator, mix=DEFAULT_MIX, noise: float = 0.003) -> DemoProfile:
    kinds = [k for k, _ in mix]
    probs = np.array([p for _, p in mix], dtype=np.float64)
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    if kind == "primary_flaw":
        kind = PRIMARY_FLAW[task.dimension]
    return DemoProfile(kind, noise=noise)


def generate_episodes(benchmark: Benchmark, per_task: int, seed: int, mix=DEFAULT_MIX,
                      task_ids: Iterable[str] | None = None) -> list[Episode]:
    """Default recipe: ``per_task`` demos per task, profiles drawn from ``mix``."""
    episodes = []
    for tid in (task_ids or benchmark.task_ids):
        task = benchmark.task(tid)
        for i in range(per_task):
            profile = profile_for(task, rng_for(seed, "mix", tid, i), mix)
            episodes.append(generate_demo(task, profile, derive_seed(seed, "demo", tid, i) % 2**31))
    return episodes


# -- annotation --------------------------------------------------------------

@dataclass(frozen=True)
class RewardWindow:
    start: int
    end: int
    reward: int


def _release_steps(ep: Episode, oid: str) -> list[int]:
    return [i for i, ev in enumerate(ep.events) if ev.released and ev.released_id == oid]


def critical_step(ep: Episode, task: TaskSpec) -> int | None:
    """Step index of the ITC-critical moment, or None if there is none."""
    oid = task.target_object
    if not any(ev.grasp_started and ev.grasped_id == oid for ev in ep.events):
        return None
    releases = _release_steps(ep, oid)
    if task.dimension == "sequence_integrity":
        return releases[0] if releases else None
    if task.dimension == "collision_free":
        others = [o for o in task.object_ids if o != oid]
        if not others:
            return releases[-1] if releases else None
        gaps = []
        for s in ep.states[1:]:
            o = s.obj(oid)
            gaps.append(min(math.hypot(o.x - s.obj(n).x, o.y - s.obj(n).y) - o.radius - s.obj(n).radius
                            for n in others))
        return int(np.argmin(gaps))
    # precision tasks: start of the final approach to the target
    if not releases:
        return None
    last = releases[-1]
    region = ep.states[0].region(task.target_region)
    reach = 2.0 * max(region.hx, region.radius)
    start = last
    for i in range(last - 1, -1, -1):
        o = ep.states[i + 1].obj(oid)
        if not o.held or abs(o.x - region.x) > reach:
            break
        start = i
    return start


def window_around(center: int, length: int, width: int = WINDOW) -> tuple[int, int]:
    if length <= width:
        return 0, max(length - 1, 0)
    start = min(max(center - width // 2, 0), length - width)
    return start, start + width - 1


def annotate(ep: Episode, task: TaskSpec) -> list[RewardWindow]:
    """One window per episode around the critical moment; reward 1 iff the
    episode satisfies the task's elegance expression."""
    n = len(ep)
    c = critical_step(ep, task)
    if c is None:
        start, end = window_around(max(n - 1, 0), n)
        return [RewardWindow(start, end, 0)]
    start, end = window_around(c, n)
    ok = evaluate(task.elegance_expr, ep.context(task))
    return [RewardWindow(start, end, int(ok))]


# -- datasets ----------------------------------------------------------------

@dataclass
class ElegantDataset:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    mc_return: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    next_index: np.ndarray
    K: int
    gamma: float
    reward_mode: str
    episode_meta: list[dict]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def chunk_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def task_ids(self) -> list[str]:
        return sorted({m["task"] for m in self.episode_meta})

    def select_episodes(self, keep) -> "ElegantDataset":
        """Sub-dataset of the episodes for which ``keep(meta)`` is true."""
        kept = [i for i, m in enumerate(self.episode_meta) if keep(m)]
        remap = {old: new for new, old in enumerate(kept)}
        rows = np.flatnonzero(np.isin(self.episode, kept))
        row_map = {old: new for new, old in enumerate(rows)}
        nxt = np.array([row_map.get(int(j), -1) if j >= 0 else -1 for j in self.next_index[rows]], dtype=np.int64)
        return ElegantDataset(
            self.obs[rows], self.actions[rows], self.rewards[rows], self.next_obs[rows], self.done[rows],
            self.mc_return[rows], np.array([remap[int(e)] for e in self.episode[rows]], dtype=np.int64),
            self.step[rows], nxt, self.K, self.gamma, self.reward_mode,
            [self.episode_meta[i] for i in kept], self.skipped)


def chained_returns(rewards, next_index, gamma: float) -> np.ndarray:
    """``V[i] = r[i] + gamma * V[next[i]]`` with ``next[i] = -1`` ending a chain.
    Links must point forward."""
    out = np.zeros(len(rewards))
    for i in range(len(rewards) - 1, -1, -1):
        j = int(next_index[i])
        if j != -1 and not i < j < len(rewards):
            raise ConfigError(f"broken episode linkage at transition {i}")
        out[i] = rewards[i] + (gamma * out[j] if j != -1 else 0.0)
    return out


def build_dataset(episodes: list[Episode], benchmark: Benchmark, K: int = 10,
                  reward_mode: str = "task_specific", gamma: float = 0.98,
                  stride: int | None = None) -> ElegantDataset:
    """Chunked transitions ``(s_t, A_t, r_t, s_{t+K}, done)``.

    Chunks start every ``stride`` steps (default K; must divide K) and link to
    the chunk starting K steps later. A chunk reaching the end of the episode
    is padded with no-op actions and marked done. Episodes shorter than K are
    skipped and counted in ``skipped``.
    """
    if not episodes:
        raise ConfigError("no episodes to build a dataset from")
    if K < 1:
        raise ConfigError("K must be >= 1")
    if reward_mode not in REWARD_MODES:
        raise ConfigError(f"unknown reward mode {reward_mode!r}")
    stride = stride or K
    if K % stride:
        raise ConfigError(f"stride {stride} must divide K={K}")
    cols = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "done", "episode", "step", "next")}
    mc_all, meta, skipped = [], [], 0
    for ep in episodes:
        n = len(ep)
        if n < K:
            skipped += 1
            continue
        task = benchmark.task(ep.task_id)
        phys = task.physics
        windows = annotate(ep, task) if reward_mode == "task_specific" else []
        vecs = np.stack([a.to_vector(phys) for a in ep.actions])
        starts = list(range(0, n, stride))
        e_idx = len(meta)
        meta.append({"task": ep.task_id, "seed": ep.seed, "profile": ep.profile,
                     "success": ep.success, "elegant": ep.elegant, "length": n})
        base = len(cols["rewards"])
        rewards, links = [], []
        for j, t in enumerate(starts):
            chunk = np.zeros((K, ACTION_DIM))
            m = min(K, n - t)
            chunk[:m] = vecs[t:t + m]
            last = t + K >= n
            if reward_mode == "task_specific":
                r = float(any(w.reward == 1 and t <= w.end and t + K - 1 >= w.start for w in windows))
            else:
                r = float(last and ep.success)
            rewards.append(r)
            cols["obs"].append(ep.observations[t])
            cols["actions"].append(chunk.reshape(-1))
            cols["next_obs"].append(ep.observations[min(t + K, n)])
            cols["done"].append(last)
            cols["episode"].append(e_idx)
            cols["step"].append(t)
            links.append(-1 if last else j + K // stride)
            cols["next"].append(-1 if last else base + j + K // stride)
        cols["rewards"].extend(rewards)
        mc_all.extend(chained_returns(rewards, links, gamma))
    if not meta:
        raise ConfigError(f"every episode is shorter than K={K}")
    if skipped:
        log.warning("skipped %d episode(s) shorter than K=%d", skipped, K)
    return ElegantDataset(
        obs=np.array(cols["obs"]), actions=np.array(cols["actions"]), rewards=np.array(cols["rewards"]),
        next_obs=np.array(cols["next_obs"]), done=np.array(cols["done"], dtype=bool),
        mc_return=np.array(mc_all), episode=np.array(cols["episode"], dtype=np.int64),
        step=np.array(cols["step"], dtype=np.int64), next_index=np.array(cols["next"], dtype=np.int64),
        K=K, gamma=gamma, reward_mode=reward_mode, episode_meta=meta, skipped=skipped)


# -- file formats --------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def dataset_lines(ds: ElegantDataset) -> list[str]:
    header = {"K": ds.K, "gamma": ds.gamma, "reward_mode": ds.reward_mode, "obs_dim": ds.obs_dim,
              "action_dim": ACTION_DIM, "task_ids": ds.task_ids, "episodes": ds.episode_meta,
              "skipped": ds.skipped}
    lines = [_dumps(header)]
    for i in range(len(ds)):
        lines.append(_dumps({
            "s": ds.obs[i].tolist(), "A": ds.actions[i].tolist(), "r": float(ds.rewards[i]),
            "s_next": ds.next_obs[i].tolist(), "done": bool(ds.done[i]), "mc_return": float(ds.mc_return[i]),
            "episode": int(ds.episode[i]), "step": int(ds.step[i]), "next": int(ds.next_index[i]),
        }))
    return lines


def save_dataset(ds: ElegantDataset, path: str | Path) -> None:
    Path(path).write_text("\n".join(dataset_lines(ds)) + "\n")


def load_dataset(path: str | Path) -> ElegantDataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"empty dataset file {path}")
    hdr = json.loads(lines[0])
    rows = [json.loads(line) for line in lines[1:]]
    obs_dim, chunk = hdr["obs_dim"], hdr["K"] * hdr["action_dim"]

    def arr(key, width):
        return np.array([r[key] for r in rows], dtype=np.float64).reshape(len(rows), width)

    return ElegantDataset(
        obs=arr("s", obs_dim), actions=arr("A", chunk), rewards=np.array([r["r"] for r in rows], dtype=np.float64),
        next_obs=arr("s_next", obs_dim), done=np.array([r["done"] for r in rows], dtype=bool),
        mc_return=np.array([r["mc_return"] for r in rows], dtype=np.float64),
        episode=np.array([r["episode"] for r in rows], dtype=np.int64),
        step=np.array([r["step"] for r in rows], dtype=np.int64),
        next_index=np.array([r["next"] for r in rows], dtype=np.int64),
        K=hdr["K"], gamma=hdr["gamma"], reward_mode=hdr["reward_mode"], episode_meta=hdr["episodes"],
        skipped=hdr.get("skipped", 0))


def episode_lines(ep: Episode) -> list[str]:
    """Trajectory log: a header line, then one record per step."""
    lines = [_dumps({"task": ep.task_id, "seed": ep.seed, "profile": ep.profile, "success": ep.success,
                     "elegant": ep.elegant, "initial_state": ep.states[0].to_dict()})]
    for i, (a, s, ev) in enumerate(zip(ep.actions, ep.states[1:], ep.events)):
        lines.append(_dumps({"time": s.time, "state": s.to_dict(), "action": a.to_list(), "events": ev.to_dict()}))
    for rec in ep.decisions:
        lines.append(_dumps({"decision": rec}))
    return lines


def save_episode(ep: Episode, path: str | Path) -> None:
    Path(path).write_text("\n".join(episode_lines(ep)) + "\n")


def load_episode(path: str | Path, task: TaskSpec) -> Episode:
    lines = Path(path).read_text().splitlines()
    hdr = json.loads(lines[0])
    states = [WorldState.from_dict(hdr["initial_state"])]
    actions, events, decisions = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        if "decision" in rec:
            decisions.append(rec["decision"])
            continue
        states.append(WorldState.from_dict(rec["state"]))
        actions.append(Action(*rec["action"]))
        events.append(StepEvents.from_dict(rec["events"]))
    obs = [observe(s, task) for s in states]
    return Episode(hdr["task"], hdr["seed"], hdr["profile"], states, actions, events, obs,
                   hdr["success"], hdr["elegant"], decisions)
