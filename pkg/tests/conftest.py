import pytest

from rssguard.experiment import ExperimentConfig, prepare_building

_criteria: dict[int, dict] = {}


@pytest.fixture(scope="session")
def default_config():
    return ExperimentConfig().validate()


@pytest.fixture(scope="session")
def default_building(default_config):
    """The pre-trained default building; shared because pre-training is the slow part."""
    return prepare_building(default_config, default_config.buildings[0])


@pytest.fixture(scope="session")
def default_contexts(default_config, default_building):
    return {default_building.spec.building_id: default_building}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number = marker.args[0]
    entry = _criteria.setdefault(number, {"title": marker.kwargs.get("title", ""), "ok": True, "seen": False})
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False
    if rep.when == "call":
        entry["seen"] = True


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']}")
