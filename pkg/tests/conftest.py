import numpy as np
import pytest
from hypothesis import settings

from divdistill.data import gen_spirals
from divdistill.train import TrainConfig, train_teachers

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_splits():
    return gen_spirals(3, 40, 0.01, seed=3)


@pytest.fixture(scope="session")
def small_teachers(small_splits):
    cfg = TrainConfig(base_lr=0.1, epochs=100, warmup_epochs=2, batch_size=16, weight_decay=0.0)
    teachers, _ = train_teachers(small_splits, [2, 16, 16, 3], 3, cfg, [1, 2, 3])
    return teachers


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record one pass/fail line per acceptance criterion; returns ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
