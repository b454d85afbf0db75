"""Shared expensive fixtures, plus one summary line per acceptance criterion."""
import time

import numpy as np
import pytest

from etfgcd.data import StreamSpec, generate_stream
from etfgcd.session import TrainConfig, run_protocol

ABLATION_SEEDS = (0, 1, 2, 3, 4)

_criteria_for = {}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria_for[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    key = _criteria_for.get(report.nodeid)
    if key is None:
        return
    if report.failed:
        _outcomes[key] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome in sorted(_outcomes.items()):
        terminalreporter.write_line(f"criterion {number:>2} {outcome}: {title}")


@pytest.fixture(scope="session")
def default_run():
    """One protocol run on the default benchmark with the desk preset, timed."""
    start = time.perf_counter()
    res = run_protocol(TrainConfig.preset("desk"), generate_stream(StreamSpec(seed=0)), seed=0)
    return res, time.perf_counter() - start


@pytest.fixture(scope="session")
def ablation_grid():
    """(sup, unsup) -> per-seed (All, Old, New) averaged over incremental stages."""
    start = time.perf_counter()
    grid = {}
    for sup in (True, False):
        for uns in (True, False):
            rows = []
            for s in ABLATION_SEEDS:
                cfg = TrainConfig.preset("desk", sup_etf_align=sup, unsup_etf_align=uns)
                res = run_protocol(cfg, generate_stream(StreamSpec(seed=s)), seed=s)
                inc = res.reports[1:]
                rows.append([np.mean([getattr(r, k) for r in inc]) for k in ("acc_all", "acc_old", "acc_new")])
            grid[sup, uns] = np.array(rows)
    return grid, time.perf_counter() - start
