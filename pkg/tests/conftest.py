import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Collects one PASS/FAIL line per acceptance criterion."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
