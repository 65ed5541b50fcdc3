from importlib import resources
from pathlib import Path

import pytest

from confrepair.kb import default_kb

FIXTURES = Path(str(resources.files("confrepair") / "data" / "corpus" / "fixtures"))
GOLDEN = Path(__file__).parent / "golden"


def fixture_paths():
    return sorted(FIXTURES.glob("*.xml"))


@pytest.fixture(scope="session")
def kb():
    return default_kb()


class FakeClock:
    """Advances by ``step`` seconds on every read."""

    def __init__(self, step=0.5):
        self.now = 0.0
        self.step = step

    def __call__(self):
        self.now += self.step
        return self.now


def no_sleep(seconds):
    pass
