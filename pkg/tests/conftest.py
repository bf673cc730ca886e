import numpy as np
import pytest
import torch

from mtarcface.datamodel import AlignedFace
from mtarcface.fixture import make_fixture


@pytest.fixture(scope="session")
def small_tree(tmp_path_factory):
    """4 identities x 6 images at 32px."""
    root = tmp_path_factory.mktemp("small") / "orig"
    return make_fixture(root, seed=3, num_identities=4, images_per_identity=6, size=32)


@pytest.fixture
def random_face():
    def make(size=112, seed=0):
        rng = np.random.default_rng(seed)
        return AlignedFace(rng.integers(0, 256, (size, size, 3), dtype=np.uint8), f"rand{seed}")
    return make


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def emit(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
