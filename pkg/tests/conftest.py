import numpy as np
import pytest

from mirror_gossip import MirrorMap


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(params=[1, 2, 3, 5, 8, 15], ids=lambda p: f"p{p}")
def power_map(request):
    return MirrorMap(float(request.param))


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criteria():
    """Collects one ``(passed, detail)`` verdict per acceptance criterion."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.split(".")[0]), k)):
        passed, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
