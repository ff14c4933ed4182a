from __future__ import annotations

import os
from pathlib import Path

import pytest

_CRITERIA: dict[str, list[str]] = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA.setdefault(mark.args[0], [])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[mark.args[0]].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _CRITERIA.items():
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"{status:8s} {name}")


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """LR, MLP and ensembled MLP on the default benchmark, computed once per session.

    Set ``STABRISK_BENCHMARK_DIR`` to keep the artifacts somewhere inspectable.
    """
    from stabrisk.pipeline import PipelineConfig, compare_architectures

    out = os.environ.get("STABRISK_BENCHMARK_DIR")
    out = Path(out) if out else tmp_path_factory.mktemp("benchmark")
    return compare_architectures(PipelineConfig(out_dir=str(out)))
