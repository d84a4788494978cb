import numpy as np
import pytest

from locallearn.train import TrainData


def random_images(n_train=128, n_test=32, shape=(3, 8, 8), n_classes=4, seed=0) -> TrainData:
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    x = rng.uniform(0, 1, (n,) + shape)
    y = rng.integers(0, n_classes, n)
    return TrainData(x[:n_train], y[:n_train], x[n_train:], y[n_train:], n_classes)


@pytest.fixture
def tiny_data():
    return random_images()


# criterion number -> (passed, detail), filled by test_acceptance and printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
