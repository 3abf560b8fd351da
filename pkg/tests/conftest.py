from __future__ import annotations

import pytest

from buseta.store import RouteStore

from .helpers import stem_loop


@pytest.fixture
def store():
    return RouteStore()


@pytest.fixture
def stem(store):
    route, ids, links = stem_loop(store)
    return store, route, ids, links


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}{'  -- ' + detail if detail else ''}")
