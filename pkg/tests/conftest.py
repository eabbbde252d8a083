import pytest

from ofair.catalog import ItemCatalog, ProtectedSpec

# three loans held by one lender, and three loans recommended to them
LOANS = {
    "l1": {"region": {"Africa"}, "gender": {"Female"}, "sector": {"Agriculture"}, "amount": {"0-500"}},
    "l2": {"region": {"Africa"}, "gender": {"Female"}, "sector": {"Health"}, "amount": {"0-500"}},
    "l3": {"region": {"Africa"}, "gender": {"Female"}, "sector": {"Clothing"}, "amount": {"0-500"}},
    "r1": {"region": {"Africa"}, "gender": {"Female"}, "sector": {"Conflict Zones"}, "amount": {"0-500"}},
    "r2": {"region": {"Africa"}, "gender": {"Female"}, "sector": {"Education"}, "amount": {"0-500"}},
    "r3": {"region": {"Asia"}, "gender": {"Male"}, "sector": {"Livestock"}, "amount": {"500-700"}},
}


@pytest.fixture
def loans():
    return ItemCatalog.from_raw(LOANS)


@pytest.fixture
def loan_spec():
    return ProtectedSpec({("sector", "Education"), ("sector", "Conflict Zones")}, alpha=1.0)


# -- acceptance reporting: one PASS/FAIL line per criterion -------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _CRITERION_BY_ID.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, [title, True])
    entry[1] = entry[1] and report.passed


_CRITERION_BY_ID: dict[str, tuple] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERION_BY_ID[item.nodeid] = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
