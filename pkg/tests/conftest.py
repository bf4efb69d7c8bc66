from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from morph4d.scene import GaussianCloud

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


def random_cloud(rng: np.random.Generator, n: int, spread: float = 1.0, id_offset: int = 0,
                 label: str = "") -> GaussianCloud:
    q = rng.normal(size=(n, 4))
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        scales=rng.uniform(0.05, 0.5, (n, 3)),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacities=rng.uniform(0.05, 1.0, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        point_ids=id_offset + rng.permutation(n),
        label=label,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
