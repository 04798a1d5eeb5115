import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dvfs_energy.backend import SimulatedBackend
from dvfs_energy.config import ToolConfig, load_model
from dvfs_energy.orchestrator import RecordSink, SweepGrid, aggregate_all, execute, plan

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    return load_model(ToolConfig())


@pytest.fixture(scope="session")
def spec(model):
    return model[0]


@pytest.fixture(scope="session")
def profiles(model):
    return model[1]


@pytest.fixture(scope="session")
def power(model):
    return model[2]


@pytest.fixture
def sim(model):
    spec, profiles, power = model
    return SimulatedBackend(spec, profiles, power, noise=0.005)


@pytest.fixture(scope="session")
def full_sweep(model, tmp_path_factory):
    """Default grid, both phases, 10 reps, sigma 0.5%, seed 0. Shared by slow tests."""
    spec, profiles, power = model
    backend = SimulatedBackend(spec, profiles, power, noise=0.005)
    grid = SweepGrid(phases=("prefill", "decode"))
    sink = RecordSink(tmp_path_factory.mktemp("sweep") / "records.jsonl")
    summary = execute(plan(grid), backend, sink, grid.repetitions, grid.warmup, seed=0)
    assert summary.ok
    return aggregate_all(sink.records(), grid.repetitions)


def constant_trace(watts=100.0, duration=2.0, cadence=0.05):
    from dvfs_energy.telemetry import PowerTrace

    t = np.arange(0.0, duration + cadence / 2, cadence)
    return PowerTrace.from_arrays(t, np.full(len(t), watts), nominal_cadence=cadence)
