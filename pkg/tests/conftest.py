import numpy as np
import pytest
import torch

from distort_ssl.phantom import PhantomParams, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Twelve 160x160 phantoms, splits 8/2/2."""
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(3, PhantomParams(image_size=160), 12, root, (8 / 12, 2 / 12, 2 / 12), force=True)
    return root


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
