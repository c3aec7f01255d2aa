import numpy as np
import pytest

from sar2opt.synth import build_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small 32px dataset shared by the fast tests."""
    root = tmp_path_factory.mktemp("tiny")
    counts = {("sar", "train"): 4, ("sar", "test"): 2, ("opt", "train"): 4, ("opt", "test"): 2}
    build_dataset(root, counts=counts, image_size=32, seed=7)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the outcome."""
    lines = request.config.stash[VERDICTS]

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
