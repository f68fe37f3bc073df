import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uwbcal import pipeline, sim
from uwbcal.config import PipelineConfig, SimulationConfig

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def train_world():
    return sim.make_world(sim.TrajectoryConfig(duration=240.0), seed=0)


@pytest.fixture(scope="session")
def train_dataset(train_world):
    return sim.run_schedule(train_world, 158.4, 240.0, 0)


@pytest.fixture(scope="session")
def true_delays(train_world):
    return {t.tag_id: t.delay for t in train_world.tags}


@pytest.fixture(scope="session")
def default_config():
    return PipelineConfig(simulation=SimulationConfig(seed=0))


@pytest.fixture(scope="session")
def calibrated(default_config):
    """Delays and power calibration from the default training run."""
    _, train = pipeline.simulate(default_config)
    sol = pipeline.calibrate_delays(train, default_config)
    delays = sol.as_dict()
    cal = pipeline.calibrate_power(train, delays, default_config)
    return train, sol, cal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def localized(calibrated, default_config):
    """RMSE rows and filter results on the default test scenarios."""
    _, sol, cal = calibrated
    return pipeline.localize(default_config, sol.as_dict(), cal)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
