from __future__ import annotations

import pytest

from buseta.errors import UnknownRoute
from buseta.eta import EtaEngine
from buseta.geo import dist
from buseta.simulator import FleetSimulator, SimConfig, run_closed_loop
from buseta.store import RouteStore
from buseta.tracking import FleetTracker

from .helpers import ORIGIN, stem_loop, loop


def square(link_m=600.0):
    store = RouteStore()
    loop(store, "Q", 1, 1, link_m=link_m)
    return store


def test_link_traversal_time():
    store = square()
    sim = FleetSimulator(store, SimConfig(speed=10.0))
    sim.add_bus("b", "Q")
    sim.step(180.0)
    # the first side runs along a meridian: exactly 600 m
    assert sim.truth.arrivals("b")[1][0] == pytest.approx(60.0, abs=1e-9)
    # east-west sides on a lat/lon grid are about a centimetre short of 600 m
    assert [t for t, _ in sim.truth.arrivals("b")] == pytest.approx([0, 60, 120, 180], abs=0.01)


def test_same_seed_same_stream():
    def run(seed):
        store = RouteStore()
        stem_loop(store)
        sim = FleetSimulator(store, SimConfig(seed=seed, gps_noise_sigma=8.0))
        sim.place_evenly("SL", 3)
        return sim.step(3600), sim.truth.as_rows()

    a, b, c = run(7), run(7), run(8)
    assert a == b
    assert a[0] != c[0]
    assert a[1] == c[1]  # noise never reaches the truth


def test_zero_noise_identical_streams():
    def run():
        sim = FleetSimulator(square(), SimConfig(seed=1))
        sim.place_evenly("Q", 2)
        return sim.step(1000)

    assert run() == run()


def test_breakdown_window():
    store = square()
    sim = FleetSimulator(store, SimConfig(breakdowns=[("b", 100.0, 120.0)]))
    sim.add_bus("b", "Q")
    ups = sim.step(400)
    during = [u for u in ups if 100 <= u.timestamp < 220]
    assert during and all(u.breakdown and u.speed == 0 for u in during)
    assert len({u.position for u in during}) == 1
    assert not any(u.breakdown for u in ups if u.timestamp < 100 or u.timestamp >= 220)
    # the bus is delayed by exactly the window
    assert sim.truth.times("b", 2)[0] == pytest.approx(120 + 120, abs=0.01)


def test_truth_independent_of_update_rate():
    def truth(rate):
        store = RouteStore()
        stem_loop(store)
        sim = FleetSimulator(store, SimConfig(update_rate=rate, dwell_time=5.0))
        sim.place_evenly("SL", 2)
        sim.step(2000)
        return sim.truth.as_rows()

    base = truth(2.0)
    for rate in (0.5, 1.0, 6.0):
        got = truth(rate)
        assert [(b, p) for b, _, p in got] == [(b, p) for b, _, p in base]
        assert [t for _, t, _ in got] == pytest.approx([t for _, t, _ in base], abs=1e-9)


def test_dwell_time():
    store = square()
    sim = FleetSimulator(store, SimConfig(dwell_time=20.0))
    sim.add_bus("b", "Q")
    sim.step(300)
    assert [t for t, _ in sim.truth.arrivals("b")][:3] == pytest.approx([0, 80, 160], abs=0.01)
    assert sim.circuit_time("Q") == pytest.approx(240 + 80, abs=0.01)


def test_updates_lie_on_the_route():
    store = square()
    sim = FleetSimulator(store, SimConfig())
    sim.add_bus("b", "Q", offset=100.0)
    ups = sim.step(300)
    assert dist(ups[0].position, store.links_of("Q")[0].start_pos) == pytest.approx(100, abs=0.1)
    assert [u.timestamp for u in ups] == [0, 30, 60, 90, 120, 150, 180, 210, 240, 270, 300]


def test_errors():
    store = square()
    sim = FleetSimulator(store)
    with pytest.raises(UnknownRoute):
        sim.add_bus("b", "nope")
    with pytest.raises(ValueError):
        sim.add_bus("b", "Q", position=9)
    with pytest.raises(ValueError):
        SimConfig(update_rate=0)
    with pytest.raises(ValueError):
        sim.step(-1)


def test_whole_run_breakdown_never_shows_up():
    store = square()
    sim = FleetSimulator(store, SimConfig(breakdowns=[("Q-2", 0.0, 1e9)]))
    sim.place_evenly("Q", 2)
    tracker, engine = FleetTracker(store), EtaEngine(store)
    for _ in range(40):
        for u in sim.step(60):
            tracker.ingest(u)
        table = engine.recompute_all(sim.now)
        assert all(e.bus_id == "Q-1" for e in table.entries.values())


def test_irregular_geometry_stays_within_two_updates():
    # link lengths that are not multiples of the distance covered per update
    store = RouteStore()
    import math

    from buseta.store import NodeKind

    from .helpers import grid_point

    corners = [(0, 0), (450, 0), (450, 150), (780, 150), (780, 520), (0, 520)]
    ids = [store.upsert_node(grid_point(ORIGIN, n, e), f"c{i}", NodeKind.STOP) for i, (n, e) in enumerate(corners)]
    links = [store.upsert_link(ids[i], ids[(i + 1) % len(ids)], 30) for i in range(len(ids))]
    store.put_route("I", links)
    sim = FleetSimulator(store, SimConfig())
    sim.place_evenly("I", 3)
    circuit = sim.circuit_time("I")
    report = run_closed_loop(sim, 20 * circuit, FleetTracker(store), EtaEngine(store), warmup=10 * circuit)
    assert report.samples > 0
    assert report.max_error <= 2 * sim.config.update_interval
    assert math.isfinite(report.max_error)


def test_report_format():
    store = square()
    sim = FleetSimulator(store, SimConfig())
    sim.place_evenly("Q", 2)
    report = run_closed_loop(sim, 3600, FleetTracker(store), EtaEngine(store), warmup=1200)
    text = report.format()
    assert text.startswith("# route\tstop\toccurrence\tn\tp50\tp90\tmax\n")
    assert "max=" in text.splitlines()[-1]
