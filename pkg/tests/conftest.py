import numpy as np
import pytest
from hypothesis import settings

from safle.federation import run_protocol

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def run_single_round(features, plan, config):
    """``run_protocol`` plus the single-round checks every federated test relies on."""
    model, report = run_protocol(features, plan, config)
    assert report.rounds == 1
    assert report.n_clients == plan.n_clients
    assert len(report.payload_bytes) == plan.n_clients
    return model, report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
