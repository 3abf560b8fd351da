from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from buseta.capacity import LoadParams, format_report, load_params, load_terms, max_fleet, reconcile, total_load
from buseta.errors import Infeasible, NoData


def by_hand(r, p=LoadParams()):
    # the four terms written out independently of load_terms
    b = r * 10
    links = r * 100
    return 10 * 2 * b + 1 * 1 * links + 6 * (20 + 50) + 1 * 1 * 2000


def test_default_fleet():
    assert max_fleet(LoadParams()) == (91, 910)


def test_hand_arithmetic_around_the_limit():
    p = LoadParams()
    assert total_load(p, 910, 9100, 2000) == by_hand(91) == 29720
    assert total_load(p, 920, 9200, 2000) == by_hand(92) == 30020
    assert by_hand(91) < 30000 <= by_hand(92)


def test_terms():
    t = load_terms(LoadParams(), 910, 9100, 2000)
    assert t == {"link_updater": 18200, "eta_calculator": 9100, "sms_web": 420, "station": 2000}


def test_strictly_under_capacity():
    # capacity exactly at R=91's load: 91 is no longer allowed
    assert max_fleet(LoadParams(r_server=29720)) == (90, 900)
    assert max_fleet(LoadParams(r_server=29721)) == (91, 910)


def test_infeasible():
    with pytest.raises(Infeasible):
        max_fleet(LoadParams(r_server=2420))
    with pytest.raises(Infeasible):
        max_fleet(LoadParams(r_b=0, r_eta=0))
    with pytest.raises(ValueError):
        LoadParams(r_b=-1)


@given(st.floats(3000, 1e6), st.floats(1, 50), st.floats(1, 500))
def test_max_fleet_is_maximal(cap, buses, links):
    p = LoadParams(r_server=cap, buses_per_route=buses, links_per_route=links)
    try:
        r, b = max_fleet(p)
    except Infeasible:
        assert total_load(p, 0, 0, p.stops) >= cap
        return
    assert total_load(p, r * buses, r * links, p.stops) < cap
    assert total_load(p, (r + 1) * buses, (r + 1) * links, p.stops) >= cap


def test_param_file():
    p = load_params("# comment\nr_server = 60000\nalpha=5  # inline\n")
    assert (p.r_server, p.alpha, p.beta) == (60000, 5, 1)
    with pytest.raises(ValueError):
        load_params("bogus=1")
    with pytest.raises(ValueError):
        load_params("r_b")


def test_report_text():
    text = format_report(LoadParams())
    assert text.splitlines()[:2] == ["routes\t91", "buses\t910"]
    assert "capacity\t30000" in text


def test_reconcile_flags_outliers():
    p = LoadParams()
    measured = {"link_updater": 18200 * 10, "eta_calculator": 9100 * 10, "sms_web": 0, "station": 2000 * 30}
    rep = {r.category: r for r in reconcile(measured, 10, p, 910, 9100, 2000)}
    assert rep["link_updater"].ratio == pytest.approx(1.0)
    assert not rep["link_updater"].flagged
    assert rep["sms_web"].flagged
    assert rep["station"].flagged and rep["station"].ratio == pytest.approx(3.0)
    with pytest.raises(NoData):
        reconcile({}, 10, p, 1, 1, 1)
