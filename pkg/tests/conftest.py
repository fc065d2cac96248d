import math

import numpy as np
import pytest

from fedex_sim import pipeline
from fedex_sim.config import bundled_config
from fedex_sim.energy import PropulsionParams, RadioParams, calibrate_noise_psd
from fedex_sim.topology import build_topology, generate_block_layout

# criterion number -> (passed, message); printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture(scope="session")
def default_radio():
    n0 = calibrate_noise_psd(0.1, 1e7, 1e-3, 1000.0, 50e6)
    return RadioParams(0.1, 1e7, n0, 1e-3, 1000.0, 8e8)


@pytest.fixture(scope="session")
def default_prop():
    return PropulsionParams.calibrated(10.0)


@pytest.fixture(scope="session")
def default_topology():
    return generate_block_layout(2000, 2000, 10, 4, seed=1)


@pytest.fixture(scope="session")
def default_cfg():
    return bundled_config("paper_default")


@pytest.fixture(scope="session")
def tiny_cfg():
    return bundled_config("tiny")


def line_topology(xs):
    """Server at the origin, clients on the x axis."""
    return build_topology([(0.0, 0.0)] + [(float(x), 0.0) for x in xs])


def random_topology(n, seed, side=1000.0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, side, size=(n + 1, 2))
    return build_topology([tuple(p) for p in pts])
