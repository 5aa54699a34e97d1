import json
from collections import defaultdict

import pytest

from wits3.experiments import load_config, solve_wits3
from wits3.model import SourceParams

_criteria: dict[int, dict] = defaultdict(lambda: {"title": "", "outcomes": []})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria[n]
    entry["title"] = title
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["outcomes"].append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        c = _criteria[n]
        failed = [name for name, o in c["outcomes"] if o != "passed"]
        status = "PASS" if c["outcomes"] and not failed else "FAIL"
        extra = f"  (failing: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {n:2d}  {status}  {c['title']}{extra}")


@pytest.fixture(scope="session")
def base_cfg():
    return load_config()


@pytest.fixture(scope="session")
def base_sources(base_cfg):
    return list(base_cfg.sources)


@pytest.fixture(scope="session")
def base_wits3(base_cfg):
    return solve_wits3(base_cfg)


@pytest.fixture
def tiny():
    """B=1, K_max=3, two channels: small enough for exhaustive policy search."""
    return SourceParams(id=1, lam=0.5, buffer=1, sampling_cost=1, channel_probs=(0.5, 0.5),
                        success_probs=(0.9, 0.1), age_cap=3)


@pytest.fixture
def raw_base_config():
    from importlib import resources

    return json.loads(resources.files("wits3").joinpath("configs/three_sources.json").read_text())
