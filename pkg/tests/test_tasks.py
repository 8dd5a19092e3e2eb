import pytest

from elegance import ConfigError
from elegance.tasks import DIMENSIONS, load_benchmark, loads_benchmark
from tests.conftest import TOY


def test_toy_parses(toy):
    assert toy.name == "toy" and toy.task_ids == ["place", "jittered"]
    t = toy.task("place")
    assert t.object_ids == ("block", "cube") and t.region_ids == ("bin", "post")
    assert t.region_spec("bin").hx == 0.08 and t.region_spec("post").radius == 0.03
    assert t.physics.a_max == 0.04 and t.gripper_start == (0.5, 0.4)
    assert toy.layout == (2, 2) and toy.obs_dim == 19


def test_builtin_benchmarks(bench8, gen_bench):
    assert len(bench8.tasks) == 8
    assert {t.dimension for t in bench8.tasks} == set(DIMENSIONS)
    assert sorted(t.family for t in bench8.tasks) == list(range(8))
    assert bench8.obs_dim == 30 and bench8.layout == (3, 2)
    assert len(gen_bench.split("seen")) == 3 and len(gen_bench.split("unseen")) == 4


def test_hash_tracks_text():
    assert loads_benchmark(TOY).source_hash == loads_benchmark(TOY).source_hash
    assert loads_benchmark(TOY + "\n").source_hash != loads_benchmark(TOY).source_hash


def test_subset_and_unknown(toy):
    assert toy.subset(["jittered"]).task_ids == ["jittered"]
    with pytest.raises(ConfigError, match="unknown task"):
        toy.task("nope")


@pytest.mark.parametrize("old, new, fragment", [
    ("success = (In block bin)", "success = (In block crate)", "undeclared"),
    ("success = (In block bin)", "success = (In block bin", "expected"),
    ("dimension = sequence_integrity", "dimension = speed", "dimension"),
    ("family = 1", "family = 5", "one-hot"),
    ("horizon = 60\ntarget = block bin", "horizon = 0\ntarget = block bin", "horizon"),
    ("target = block bin", "target = block", "target"),
    ("region.bin = container", "region.bin = bucket", "region line"),
    ("object.block = x=0.2 y=0.03 r=0.03\n", "object.block = x=0.2 y=0.03 z=1\n", "object line"),
    ("a_max = 0.04", "", "a_max"),
    ("instruction = put the block in the bin\n", "", "instruction"),
])
def test_bad_task_files(old, new, fragment):
    assert old in TOY
    with pytest.raises(ConfigError, match=fragment):
        loads_benchmark(TOY.replace(old, new, 1))


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_benchmark("/nonexistent/x.tasks")
