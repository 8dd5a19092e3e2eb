import pytest

from elegance.tasks import load_benchmark, loads_benchmark

TOY = """
[benchmark]
name = toy
grasp_radius = 0.04
a_max = 0.04
dangle_max = 0.2
clearance = 0.02
object_slots = 2
region_slots = 2
families = 2
gripper = 0.5 0.4

[task:place]
instruction = put the block in the bin
dimension = sequence_integrity
family = 0
horizon = 60
target = block bin
carry_height = 0.3
object.block = x=0.2 y=0.03 r=0.03
object.cube = x=0.45 y=0.03 r=0.03
region.bin = container x=0.75 y=0.08 hx=0.08 hy=0.08
region.post = obstacle x=0.45 y=0.25 r=0.03
success = (In block bin)
elegance = (and (In block bin) (AtRelease (In block bin)))

[task:jittered]
instruction = same layout with jitter
dimension = pose_accuracy
family = 1
horizon = 60
target = block pad
carry_height = 0.3
object.block = x=0.2 y=0.03 r=0.03 jx=0.05 jy=0.01 jangle=0.3
object.cube = x=0.45 y=0.03 r=0.03 jx=0.05
region.pad = surface x=0.75 y=0.03 hx=0.08 hy=0.03 jx=0.03
success = (On block pad)
elegance = (IsPreciselyOn block pad 0.02)
"""


@pytest.fixture(scope="session")
def toy():
    return loads_benchmark(TOY)


@pytest.fixture(scope="session")
def bench8():
    return load_benchmark("elegant8")


@pytest.fixture(scope="session")
def gen_bench():
    return load_benchmark("generalization")


@pytest.fixture(scope="session")
def toy_episodes(toy):
    from elegance.demos import generate_episodes
    return generate_episodes(toy, 6, seed=1)


@pytest.fixture(scope="session")
def toy_policy(toy, toy_episodes):
    from elegance.demos import build_dataset
    from elegance.policy import FlowConfig, train_policy
    ds = build_dataset(toy_episodes, toy, K=10, stride=1)
    return train_policy(ds, FlowConfig(hidden=(32,), steps=150, batch_size=64, log_interval=50), seed=0,
                        layout=toy.layout)


@pytest.fixture(scope="session")
def toy_critic(toy, toy_episodes, toy_policy):
    from elegance.critic import CalQLConfig, train_critic
    from elegance.demos import build_dataset
    ds = build_dataset(toy_episodes, toy, K=10, stride=2)
    return train_critic(ds, toy_policy, CalQLConfig(hidden=(32,), steps=60, log_interval=20), seed=0).critic


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
