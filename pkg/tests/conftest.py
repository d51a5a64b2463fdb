import numpy as np
import pytest

from flowrecon.synth import make_geometry, solve_reference

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[ACCEPTANCE_LINES]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record a one-line pass/fail verdict for an acceptance criterion, then assert it."""
    def record(number: int, title: str, ok: bool, detail: str):
        line = f"[{number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line
    return record


@pytest.fixture(scope="session")
def converging_case():
    """Default converging channel at 128^2: (mask, geometry, ground truth)."""
    mask, geo = make_geometry("converging_channel")
    return mask, geo, solve_reference(geo)


@pytest.fixture(scope="session")
def straight_case():
    mask, geo = make_geometry("straight_channel")
    return mask, geo, solve_reference(geo)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def aorta_case():
    mask, geo = make_geometry("aorta_like")
    return mask, geo, solve_reference(geo)
