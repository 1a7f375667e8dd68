import numpy as np
import pytest

from hoifit.errors import UnsatisfiableScene
from hoifit.synth import _shared_template, generate_scene, random_scene_spec

# criterion number -> summary line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def first_scene(kind, seed=0, **kw):
    """First satisfiable scene of ``kind`` at or after ``seed``."""
    for s in range(seed, seed + 50):
        try:
            return generate_scene(random_scene_spec(kind, s, **kw))
        except UnsatisfiableScene:
            continue
    raise RuntimeError(f"no satisfiable {kind} scene")


@pytest.fixture(scope="session")
def template():
    return _shared_template()


@pytest.fixture(scope="session")
def grasp_frame():
    return first_scene("grasp", 3)


@pytest.fixture(scope="session")
def hand_frame():
    return first_scene("hand_on_top", 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
