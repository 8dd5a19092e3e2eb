"""Task specifications and the benchmark task-file format.

A task file is INI text. ``[benchmark]`` holds the shared physics and
observation-layout constants; each ``[task:<id>]`` section declares a layout,
the two predicate expressions, and the hints the scripted demonstrator uses::

    [benchmark]
    name = elegant8
    grasp_radius = 0.04        ; physics
    a_max = 0.04
    dangle_max = 0.2
    clearance = 0.02           ; min gap between object discs at reset
    object_slots = 3           ; observation layout
    region_slots = 2
    families = 8
    gripper = 0.5 0.45         ; nominal start and jitter
    gripper_jitter = 0.03 0.03

    [task:ketchup_basket]
    instruction = pick up the ketchup and place it in the basket
    dimension = sequence_integrity
    family = 0
    horizon = 80
    target = ketchup basket    ; task object, target region
    carry_height = 0.32
    target_angle = 0.0         ; optional
    split = seen               ; optional (seen | unseen)
    object.ketchup = x=0.22 y=0.025 r=0.025 jx=0.04
    region.basket = container x=0.75 y=0.08 hx=0.08 hy=0.08 jx=0.03
    success = (In ketchup basket)
    elegance = (and (In ketchup basket) (AtRelease (In ketchup basket)))

Objects are listed with the task object first; that order fixes observation slots.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from elegance import ConfigError
from elegance.itcdsl import Expr, parse, referenced_ids
from elegance.world import REGION_KINDS, Physics, obs_dim

DIMENSIONS = ("sequence_integrity", "pose_accuracy", "pose_alignment", "collision_free")


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    x: float
    y: float
    radius: float = 0.03
    angle: float = 0.0
    jx: float = 0.0
    jy: float = 0.0
    jangle: float = 0.0


@dataclass(frozen=True)
class RegionSpec:
    id: str
    kind: str
    x: float
    y: float
    hx: float = 0.0
    hy: float = 0.0
    radius: float = 0.0
    jx: float = 0.0
    jy: float = 0.0


@dataclass(frozen=True)
class TaskSpec:
    id: str
    instruction: str
    dimension: str
    family: int
    horizon: int
    objects: tuple[ObjectSpec, ...]
    regions: tuple[RegionSpec, ...]
    success_text: str
    elegance_text: str
    target_object: str
    target_region: str
    carry_height: float
    physics: Physics
    target_angle: float | None = None
    split: str | None = None
    clearance: float = 0.02
    object_slots: int = 3
    region_slots: int = 2
    n_families: int = 8
    gripper_start: tuple[float, float] = (0.5, 0.45)
    gripper_jitter: tuple[float, float] = (0.0, 0.0)
    success_expr: Expr = field(init=False, compare=False, repr=False)
    elegance_expr: Expr = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "success_expr", parse(self.success_text))
        object.__setattr__(self, "elegance_expr", parse(self.elegance_text))
        if self.horizon < 1:
            raise ConfigError(f"task {self.id}: horizon must be >= 1")
        if self.dimension not in DIMENSIONS:
            raise ConfigError(f"task {self.id}: unknown elegance dimension {self.dimension!r}")
        if len(self.objects) > self.object_slots or len(self.regions) > self.region_slots:
            raise ConfigError(f"task {self.id}: more objects/regions than observation slots")
        if not 0 <= self.family < self.n_families:
            raise ConfigError(f"task {self.id}: family {self.family} outside one-hot range")
        obj_ids, region_ids = set(self.object_ids), set(self.region_ids)
        for label, expr in (("success", self.success_expr), ("elegance", self.elegance_expr)):
            objs, regions = referenced_ids(expr)
            if objs - obj_ids or regions - region_ids:
                raise ConfigError(f"task {self.id}: {label} expression references undeclared ids "
                                  f"{sorted((objs - obj_ids) | (regions - region_ids))}")
        if self.target_object not in obj_ids or self.target_region not in region_ids:
            raise ConfigError(f"task {self.id}: target ids not declared")

    @property
    def object_ids(self) -> tuple[str, ...]:
        return tuple(o.id for o in self.objects)

    @property
    def region_ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.regions)

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.object_slots, self.region_slots, self.n_families)

    def region_spec(self, rid: str) -> RegionSpec:
        return next(r for r in self.regions if r.id == rid)

    def object_spec(self, oid: str) -> ObjectSpec:
        return next(o for o in self.objects if o.id == oid)


@dataclass(frozen=True)
class Benchmark:
    name: str
    tasks: tuple[TaskSpec, ...]
    source_hash: str = ""

    def task(self, tid: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == tid:
                return t
        raise ConfigError(f"benchmark {self.name}: unknown task {tid!r}")

    @property
    def task_ids(self) -> list[str]:
        return [t.id for t in self.tasks]

    @property
    def obs_dim(self) -> int:
        return self.tasks[0].obs_dim

    @property
    def physics(self) -> Physics:
        return self.tasks[0].physics

    @property
    def layout(self) -> tuple[int, int]:
        """(object_slots, region_slots) of the shared observation layout."""
        return self.tasks[0].object_slots, self.tasks[0].region_slots

    def split(self, name: str) -> list[TaskSpec]:
        return [t for t in self.tasks if t.split == name]

    def subset(self, ids) -> "Benchmark":
        ids = list(ids)
        return Benchmark(self.name, tuple(self.task(i) for i in ids), self.source_hash)


def _kv(text: str) -> tuple[list[str], dict[str, float]]:
    words, pairs = [], {}
    for tok in text.split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            try:
                pairs[k] = float(v)
            except ValueError:
                raise ConfigError(f"bad numeric value in {tok!r}") from None
        else:
            words.append(tok)
    return words, pairs


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = text.split()
    if len(parts) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {text!r}")
    return tuple(float(p) for p in parts)


_OBJECT_KEYS = {"x", "y", "r", "angle", "jx", "jy", "jangle"}
_REGION_KEYS = {"x", "y", "hx", "hy", "r", "jx", "jy"}


def loads_benchmark(text: str) -> Benchmark:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed task file: {exc}") from None
    if "benchmark" not in cp:
        raise ConfigError("task file has no [benchmark] section")
    hdr = cp["benchmark"]
    try:
        physics = Physics(float(hdr["grasp_radius"]), float(hdr["a_max"]), float(hdr["dangle_max"]))
        shared = dict(
            clearance=float(hdr.get("clearance", "0.02")),
            object_slots=int(hdr["object_slots"]),
            region_slots=int(hdr["region_slots"]),
            n_families=int(hdr["families"]),
            gripper_start=_floats(hdr["gripper"], 2, "gripper"),
            gripper_jitter=_floats(hdr.get("gripper_jitter", "0 0"), 2, "gripper_jitter"),
        )
    except KeyError as exc:
        raise ConfigError(f"[benchmark] is missing key {exc}") from None

    tasks = []
    for section in cp.sections():
        if not section.startswith("task:"):
            continue
        sec = cp[section]
        tid = section[len("task:"):]
        objects, regions = [], []
        for key, value in sec.items():
            if key.startswith("object."):
                words, kv = _kv(value)
                if words or set(kv) - _OBJECT_KEYS:
                    raise ConfigError(f"task {tid}: bad object line {value!r}")
                objects.append(ObjectSpec(key[7:], kv["x"], kv["y"], kv.get("r", 0.03), kv.get("angle", 0.0),
                                          kv.get("jx", 0.0), kv.get("jy", 0.0), kv.get("jangle", 0.0)))
            elif key.startswith("region."):
                words, kv = _kv(value)
                if len(words) != 1 or words[0] not in REGION_KINDS or set(kv) - _REGION_KEYS:
                    raise ConfigError(f"task {tid}: bad region line {value!r}")
                regions.append(RegionSpec(key[7:], words[0], kv["x"], kv["y"], kv.get("hx", 0.0),
                                          kv.get("hy", 0.0), kv.get("r", 0.0), kv.get("jx", 0.0), kv.get("jy", 0.0)))
        try:
            target = sec["target"].split()
            if len(target) != 2:
                raise ConfigError(f"task {tid}: target must name an object and a region")
            tasks.append(TaskSpec(
                id=tid,
                instruction=sec["instruction"],
                dimension=sec["dimension"],
                family=int(sec["family"]),
                horizon=int(sec["horizon"]),
                objects=tuple(objects),
                regions=tuple(regions),
                success_text=sec["success"],
                elegance_text=sec["elegance"],
                target_object=target[0],
                target_region=target[1],
                carry_height=float(sec["carry_height"]),
                physics=physics,
                target_angle=float(sec["target_angle"]) if "target_angle" in sec else None,
                split=sec.get("split"),
                **shared,
            ))
        except KeyError as exc:
            raise ConfigError(f"task {tid}: missing key {exc}") from None
    if not tasks:
        raise ConfigError("task file declares no tasks")
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return Benchmark(hdr.get("name", "unnamed"), tuple(tasks), digest)


def load_benchmark(path: str | Path) -> Benchmark:
    """Load a task file; the names ``elegant8`` and ``generalization`` resolve
    to the files shipped with the package."""
    p = Path(path)
    if not p.exists() and p.suffix == "":
        builtin = resources.files("elegance") / "data" / f"{path}.tasks"
        if builtin.is_file():
            return loads_benchmark(builtin.read_text())
    if not p.exists():
        raise ConfigError(f"task file not found: {path}")
    return loads_benchmark(p.read_text())
