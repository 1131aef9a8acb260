import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"
NATURAL = ("astronaut", "chelsea", "coffee", "rocket", "hubble", "hopper")

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def natural_images():
    from bcdnet.imageio import read_image

    return {name: read_image(FIXTURES / f"{name}.ppm") for name in NATURAL}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (criterion, passed, detail) here; printed after the run
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def record():
    """record(criterion, passed, detail) -> passed"""

    def _record(criterion: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_RESULTS.append((criterion, bool(passed), detail))
        return bool(passed)

    return _record
