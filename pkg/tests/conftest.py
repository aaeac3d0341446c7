import pytest
import torch

from clusterbreak.attack import AttackConfig, train_attack
from clusterbreak.clustering import TrainerConfig, train_toy_clusterer
from clusterbreak.data import make_synthetic_image_dataset, train_test_split

torch.set_num_threads(1)

# Shared desk-scale setup: 4 classes, 400 images each, 25% held out.
N_PER_CLASS = 400
K = 4


@pytest.fixture(scope="session")
def split():
    full = make_synthetic_image_dataset(N_PER_CLASS, K, seed=0)
    return train_test_split(full, 0.25, 0)


@pytest.fixture(scope="session")
def victim(split):
    return train_toy_clusterer(split[0], K, TrainerConfig(seed=0))


@pytest.fixture(scope="session")
def victim_b(split):
    return train_toy_clusterer(split[0], K, TrainerConfig(seed=1))


@pytest.fixture(scope="session")
def attack_run(victim, split):
    return train_attack(victim.clone(), split[0], AttackConfig(seed=0))


@pytest.fixture(scope="session")
def attack_run_b(victim_b, split):
    return train_attack(victim_b.clone(), split[0], AttackConfig(seed=0))


@pytest.fixture(scope="session")
def small_split():
    full = make_synthetic_image_dataset(30, 3, h=8, w=8, seed=3)
    return train_test_split(full, 0.3, 0)


@pytest.fixture(scope="session")
def small_victim(small_split):
    cfg = TrainerConfig(pretrain_epochs=3, refine_epochs=1, kmeans_restarts=2, seed=0)
    return train_toy_clusterer(small_split[0], 3, cfg)


QUICK_ATTACK = dict(max_batches=12, min_batches=0, batch_size=16)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    status = "PASS" if report.passed else "FAIL"
    _CRITERIA[props["criterion"]] = (status, props.get("title", ""), props.get("measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, measured = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{measured}]" if measured else ""))


@pytest.fixture()
def criterion(request, record_property):
    """Tag a test with its criterion; call ``criterion.measured(text)`` to attach observed values."""
    marker = request.node.get_closest_marker("criterion")
    record_property("criterion", marker.args[0])
    record_property("title", marker.args[1])

    class _Recorder:
        @staticmethod
        def measured(text):
            record_property("measured", text)

    return _Recorder()
