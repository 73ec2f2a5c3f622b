import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def synth_video():
    from surgseg_eval.synthetic import make_synthetic_video

    return make_synthetic_video(num_frames=120, num_objects=3, seed=0)


@pytest.fixture(scope="session")
def small_video():
    from surgseg_eval.synthetic import make_synthetic_video

    return make_synthetic_video(num_frames=20, width=64, height=48, num_objects=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each, collected here and printed at the end
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
