import copy

import numpy as np
import pytest

from rpems import scenario as sc

SQUARE_DOC = {
    "schema_version": 1,
    "m_cells": 10,
    "n_cells": 10,
    "cell_dx": 0.03854,
    "cell_dy": 0.03854,
    "height_d": 5.0,
    "frequency_f0": 3.5e9,
    "incident": {"theta_inc": 0.0, "phi_inc": 0.0, "e_perp": 1.0, "e_par": 1.0},
    "obs": {"x_range": [0.5, 74.5], "y_range": [0.5, 59.5], "nx": 75, "ny": 60},
    "footprints": [
        {"coverage_regions": [sc.square((25.0, 30.0), 10.0)], "level_in_db": -10.0, "level_out_db": -50.0}
    ],
}


def square_doc(m=10, n=None, **kw):
    doc = copy.deepcopy(SQUARE_DOC)
    doc["m_cells"] = m
    doc["n_cells"] = m if n is None else n
    doc.update(kw)
    return doc


def square_spec(m=10, n=None, **kw):
    return sc.scenario_from_dict(square_doc(m, n, **kw))


@pytest.fixture
def spec10():
    return square_spec(10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion in the terminal report

_CRITERIA = {}


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
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or (rep.when == "setup" and rep.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {e['title']}")
