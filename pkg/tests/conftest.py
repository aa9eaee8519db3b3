import time
import warnings

import pytest

from corridor_calib.bilevel import BilevelOptions, run_bilevel
from corridor_calib.speedcal import SpsaOptions
from corridor_calib.synth import ScenarioSpec, generate


@pytest.fixture(scope="session")
def free_flow():
    return generate(ScenarioSpec(shape="free-flow", seed=1))


@pytest.fixture(scope="session")
def stop_and_go():
    return generate(ScenarioSpec(shape="stop-and-go", seed=1))


@pytest.fixture(scope="session")
def biased_stop_and_go():
    # counts understate the day's traffic by 15%, so flows alone cannot explain the speeds
    return generate(ScenarioSpec(shape="stop-and-go", seed=1, flow_bias=0.15))


@pytest.fixture(scope="session")
def calibration_runs(biased_stop_and_go):
    """Sequential and bi-level runs on the biased scenario, with wall time."""
    sc = biased_stop_and_go
    out = {}
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for mode in ("sequential", "bilevel"):
            opts = BilevelOptions(mode=mode, max_outer=6, spsa=SpsaOptions(max_iters=20), seed=1)
            out[mode] = run_bilevel(sc.network, sc.observations, opts)
    out["elapsed"] = time.perf_counter() - t0
    return out


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
