"""Deterministic 2-D kinematic manipulation world (side view: x right, y up).

The gripper is a point. The held object is a disc rigidly attached to it; when
its disc overlaps another object's disc the other object is pushed out of
contact, and overlaps with obstacle discs are recorded. Releasing over or
inside a container drops the object to the container floor; releasing
anywhere else leaves it where it is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from elegance import ConfigError
from elegance.seeding import rng_for

if TYPE_CHECKING:
    from elegance.tasks import TaskSpec

ACTION_DIM = 4
REGION_KINDS = ("container", "surface", "obstacle")


def wrap_angle(a: float) -> float:
    return math.remainder(a, 2.0 * math.pi)


@dataclass(frozen=True)
class Physics:
    grasp_radius: float = 0.04
    a_max: float = 0.04
    dangle_max: float = 0.2


@dataclass(frozen=True)
class Gripper:
    x: float
    y: float
    grip: bool = False


@dataclass(frozen=True)
class ObjectState:
    id: str
    x: float
    y: float
    angle: float = 0.0
    held: bool = False
    radius: float = 0.03


@dataclass(frozen=True)
class Region:
    id: str
    kind: str
    x: float
    y: float
    hx: float = 0.0
    hy: float = 0.0
    radius: float = 0.0

    def contains(self, px: float, py: float) -> bool:
        if self.kind == "obstacle":
            return math.hypot(px - self.x, py - self.y) <= self.radius
        return abs(px - self.x) <= self.hx and abs(py - self.y) <= self.hy

    @property
    def floor_y(self) -> float:
        """Resting ordinate of an object dropped into a container."""
        return self.y - 0.5 * self.hy

    def catches(self, px: float, py: float) -> bool:
        """A released object at (px, py) falls into this container."""
        return self.kind == "container" and abs(px - self.x) <= self.hx and py >= self.y - self.hy


@dataclass(frozen=True)
class WorldState:
    time: int
    gripper: Gripper
    objects: tuple[ObjectState, ...]
    regions: tuple[Region, ...]
    grasp_offset: tuple[float, float] = (0.0, 0.0)

    def obj(self, oid: str) -> ObjectState:
        for o in self.objects:
            if o.id == oid:
                return o
        raise ConfigError(f"unknown object id {oid!r}")

    def region(self, rid: str) -> Region:
        for r in self.regions:
            if r.id == rid:
                return r
        raise ConfigError(f"unknown region id {rid!r}")

    def held_object(self) -> ObjectState | None:
        for o in self.objects:
            if o.held:
                return o
        return None

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "gripper": [self.gripper.x, self.gripper.y, self.gripper.grip],
            "objects": [[o.id, o.x, o.y, o.angle, o.held, o.radius] for o in self.objects],
            "regions": [[r.id, r.kind, r.x, r.y, r.hx, r.hy, r.radius] for r in self.regions],
            "grasp_offset": list(self.grasp_offset),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        gx, gy, grip = d["gripper"]
        return cls(
            time=d["time"],
            gripper=Gripper(gx, gy, grip),
            objects=tuple(ObjectState(*o) for o in d["objects"]),
            regions=tuple(Region(*r) for r in d["regions"]),
            grasp_offset=tuple(d["grasp_offset"]),
        )


@dataclass(frozen=True)
class Action:
    dx: float = 0.0
    dy: float = 0.0
    dangle: float = 0.0
    grip_cmd: float = 0.0

    def clamped(self, physics: Physics) -> "Action":
        vals = (self.dx, self.dy, self.dangle, self.grip_cmd)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"non-finite action {vals}")
        a, da = physics.a_max, physics.dangle_max
        return Action(min(max(self.dx, -a), a), min(max(self.dy, -a), a),
                      min(max(self.dangle, -da), da), min(max(self.grip_cmd, -1.0), 1.0))

    def to_vector(self, physics: Physics) -> np.ndarray:
        """Normalised form used by the learned models: every component in [-1, 1]."""
        return np.array([self.dx / physics.a_max, self.dy / physics.a_max,
                         self.dangle / physics.dangle_max, self.grip_cmd])

    @classmethod
    def from_vector(cls, v, physics: Physics) -> "Action":
        return cls(float(v[0]) * physics.a_max, float(v[1]) * physics.a_max,
                   float(v[2]) * physics.dangle_max, float(v[3]))

    def to_list(self) -> list[float]:
        return [self.dx, self.dy, self.dangle, self.grip_cmd]


def chunk_to_actions(chunk: np.ndarray, physics: Physics) -> list[Action]:
    rows = np.asarray(chunk, dtype=np.float64).reshape(-1, ACTION_DIM)
    return [Action.from_vector(r, physics) for r in rows]


def actions_to_chunk(actions: list[Action], physics: Physics) -> np.ndarray:
    return np.concatenate([a.to_vector(physics) for a in actions])


@dataclass(frozen=True)
class StepEvents:
    grasp_started: bool = False
    released: bool = False
    grasped_id: str | None = None
    released_id: str | None = None
    collisions: tuple[tuple[str, str], ...] = ()
    displacements: tuple[tuple[str, float], ...] = ()

    def displacement(self, oid: str) -> float:
        return dict(self.displacements).get(oid, 0.0)

    def to_dict(self) -> dict:
        return {
            "grasp_started": self.grasp_started, "released": self.released,
            "grasped_id": self.grasped_id, "released_id": self.released_id,
            "collisions": [list(c) for c in self.collisions],
            "displacements": [list(d) for d in self.displacements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepEvents":
        return cls(d["grasp_started"], d["released"], d["grasped_id"], d["released_id"],
                   tuple(tuple(c) for c in d["collisions"]), tuple(tuple(x) for x in d["displacements"]))


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def step(state: WorldState, action: Action, physics: Physics) -> tuple[WorldState, StepEvents]:
    """Advance one tick. Grip commands act at the current pose, then the gripper
    moves by the clamped deltas carrying any held object."""
    act = action.clamped(physics)
    objects = list(state.objects)
    gripper = state.gripper
    offset = state.grasp_offset
    held_idx = next((i for i, o in enumerate(objects) if o.held), None)
    grasp_started = released = False
    grasped_id = released_id = None

    if act.grip_cmd < -0.5:
        gripper = replace(gripper, grip=False)
        if held_idx is not None:
            o = objects[held_idx]
            new = replace(o, held=False)
            for r in state.regions:
                if r.catches(o.x, o.y):
                    new = replace(new, y=r.floor_y)
                    break
            objects[held_idx] = new
            released, released_id = True, o.id
            held_idx, offset = None, (0.0, 0.0)
    elif act.grip_cmd > 0.5:
        gripper = replace(gripper, grip=True)
        if held_idx is None:
            best, best_d = None, physics.grasp_radius
            for i, o in enumerate(objects):
                d = math.hypot(o.x - gripper.x, o.y - gripper.y)
                if d <= best_d:
                    best, best_d = i, d
            if best is not None:
                o = objects[best]
                objects[best] = replace(o, held=True)
                offset = (o.x - gripper.x, o.y - gripper.y)
                held_idx, grasp_started, grasped_id = best, True, o.id

    gripper = replace(gripper, x=gripper.x + act.dx, y=gripper.y + act.dy)
    collisions: set[tuple[str, str]] = set()
    if held_idx is not None:
        o = objects[held_idx]
        objects[held_idx] = replace(o, x=gripper.x + offset[0], y=gripper.y + offset[1],
                                    angle=wrap_angle(o.angle + act.dangle))
        mover = objects[held_idx]
        for i, other in enumerate(objects):
            if i == held_idx:
                continue
            dx, dy = other.x - mover.x, other.y - mover.y
            dist = math.hypot(dx, dy)
            reach = mover.radius + other.radius
            if dist < reach:
                collisions.add(_pair(mover.id, other.id))
                ux, uy = (dx / dist, dy / dist) if dist > 1e-12 else (1.0, 0.0)
                push = reach - dist
                objects[i] = replace(other, x=other.x + ux * push, y=other.y + uy * push)
        for r in state.regions:
            if r.kind == "obstacle" and math.hypot(r.x - mover.x, r.y - mover.y) < mover.radius + r.radius:
                collisions.add(_pair(mover.id, r.id))

    displacements = tuple(
        (new.id, math.hypot(new.x - old.x, new.y - old.y))
        for old, new in zip(state.objects, objects)
    )
    events = StepEvents(grasp_started, released, grasped_id, released_id,
                        tuple(sorted(collisions)), displacements)
    return WorldState(state.time + 1, gripper, tuple(objects), state.regions, offset), events


def reset(task: "TaskSpec", seed: int, max_tries: int = 100) -> WorldState:
    """Initial state for ``(task, seed)``; jitter is uniform within the layout bounds."""
    rng = rng_for(seed, "reset", task.id)
    for _ in range(max_tries):
        gx = task.gripper_start[0] + rng.uniform(-1, 1) * task.gripper_jitter[0]
        gy = task.gripper_start[1] + rng.uniform(-1, 1) * task.gripper_jitter[1]
        objects = tuple(
            ObjectState(o.id, o.x + rng.uniform(-1, 1) * o.jx, o.y + rng.uniform(-1, 1) * o.jy,
                        wrap_angle(o.angle + rng.uniform(-1, 1) * o.jangle), False, o.radius)
            for o in task.objects
        )
        regions = tuple(
            Region(r.id, r.kind, r.x + rng.uniform(-1, 1) * r.jx, r.y + rng.uniform(-1, 1) * r.jy,
                   r.hx, r.hy, r.radius)
            for r in task.regions
        )
        if min_separation(objects) >= task.clearance:
            return WorldState(0, Gripper(gx, gy, False), objects, regions)
    raise ConfigError(f"task {task.id}: could not generate a feasible layout in {max_tries} tries")


def min_separation(objects) -> float:
    """Smallest surface-to-surface gap between any two object discs."""
    best = math.inf
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            best = min(best, math.hypot(a.x - b.x, a.y - b.y) - a.radius - b.radius)
    return best


def obs_dim(object_slots: int, region_slots: int, n_families: int) -> int:
    return 3 + 5 * object_slots + 2 * region_slots + n_families


def observe(state: WorldState, task: "TaskSpec") -> np.ndarray:
    """Gripper (x, y, grip), per object slot (x, y, sin, cos, held), per region
    slot (x, y), then a task-family one-hot. Unused slots are zero."""
    out = np.zeros(obs_dim(task.object_slots, task.region_slots, task.n_families))
    g = state.gripper
    out[0:3] = (g.x, g.y, 1.0 if g.grip else 0.0)
    by_id = {o.id: o for o in state.objects}
    base = 3
    for i, oid in enumerate(task.object_ids):
        if oid not in by_id:
            raise ConfigError(f"object {oid!r} declared by task {task.id} missing from state")
        o = by_id[oid]
        out[base + 5 * i: base + 5 * i + 5] = (o.x, o.y, math.sin(o.angle), math.cos(o.angle), float(o.held))
    base += 5 * task.object_slots
    regions = {r.id: r for r in state.regions}
    for i, rid in enumerate(task.region_ids):
        r = regions[rid]
        out[base + 2 * i: base + 2 * i + 2] = (r.x, r.y)
    base += 2 * task.region_slots
    out[base + task.family] = 1.0
    return out


REL_SCALE = 10.0


def relative_dim(layout: tuple[int, int] | None) -> int:
    if layout is None:
        return 0
    o, r = layout
    return 2 * o + 2 * o * r


def featurize(obs: np.ndarray, layout: tuple[int, int] | None) -> np.ndarray:
    """Observation rows followed by scaled relative offsets: each object minus
    the gripper, then each region minus each object. ``layout`` is
    ``(object_slots, region_slots)``; ``None`` passes observations through."""
    obs = np.atleast_2d(obs)
    if layout is None:
        return obs
    o, r = layout
    g = obs[:, 0:2]
    objs = [obs[:, 3 + 5 * i: 5 + 5 * i] for i in range(o)]
    base = 3 + 5 * o
    regs = [obs[:, base + 2 * j: base + 2 * j + 2] for j in range(r)]
    rel = [ob - g for ob in objs] + [rg - ob for ob in objs for rg in regs]
    return np.concatenate([obs, REL_SCALE * np.concatenate(rel, axis=1)], axis=1)
