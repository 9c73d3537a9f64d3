import pytest
import torch

from selfdistill.data import load_dataset
from selfdistill.training import TrainingConfig


@pytest.fixture(scope="session")
def small_data():
    """Small synthetic split (16x16 images) for fast training tests."""
    return load_dataset("synthetic-gaussian-10", n_train=320, n_test=160, image_size=16)


@pytest.fixture
def tiny_config():
    def make(**overrides):
        base = dict(
            model="tiny-resnet-3block",
            epochs=2,
            batch_size=64,
            lr=0.05,
            seed=0,
        )
        base.update(overrides)
        return TrainingConfig(**base)

    return make


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(1)
    yield


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record a one-line verdict; all verdicts are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, passed: bool, detail: str) -> str:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
