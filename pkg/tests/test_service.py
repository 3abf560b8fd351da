from __future__ import annotations

import socket
import statistics
import threading
import time

import pytest
from fastapi.testclient import TestClient

from buseta.errors import BindFailure
from buseta.eta import LinkWalkPredictor
from buseta.route_creator import TracePoint, format_trace
from buseta.service import ServiceConfig, System, create_app, parse_config, serve
from buseta.simulator import FleetSimulator, SimConfig
from buseta.store import NodeKind, RouteStore
from buseta.tracking import PositionUpdate, format_update

from .helpers import ORIGIN, stem_loop, grid_point, loop

SECRET = "s3cret"


class Clock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t


def make_system(tmp_path=None, **kw):
    cfg = ServiceConfig(admin_secret=SECRET, journal=str(tmp_path / "j.jsonl") if tmp_path else None, **kw)
    clock = Clock()
    system = System(cfg, clock=clock)
    return system, clock


def square_trace(route_m=600.0):
    pts = [(0, 0, "Library"), (route_m / 2, 0, None), (route_m, 0, "Gate"), (route_m, route_m, None),
           (0, route_m, "Hostel"), (0, 0, None)]
    out = []
    for i, (n, e, name) in enumerate(pts):
        out.append(TracePoint(grid_point(ORIGIN, n, e), 1000.0 + 60 * i, NodeKind.STOP if name else None, name))
    return format_trace(out)


@pytest.fixture
def client(tmp_path):
    system, clock = make_system(tmp_path)
    app = create_app(system, run_ticker=False)
    with TestClient(app) as c:
        c.clock = clock
        c.system = system
        yield c


def admin(c):
    return {"X-Admin-Secret": SECRET}


def setup_route(c):
    r = c.post("/admin/routes", params={"route": "21A"}, content=square_trace(), headers=admin(c))
    assert r.status_code == 200, r.text
    r = c.post("/admin/buses", json={"bus_id": "KA1", "route_id": "21A"}, headers=admin(c))
    assert r.status_code == 200
    return r


def line(bus, p, speed, t, breakdown=False):
    return format_update(PositionUpdate(bus, p, speed, t, breakdown))


def test_end_to_end_ingest_then_arrivals(client):
    setup_route(client)
    body = line("KA1", grid_point(ORIGIN, 100, 0), 10.0, 1000.0) + "\n"
    r = client.post("/updates", content=body)
    assert r.status_code == 200 and r.text.startswith("accepted 1")
    r = client.get("/eta", params={"stop": "Gate"})
    assert r.status_code == 200
    (row,) = r.json()["rows"]
    # the collinear midpoint is simplified away: Gate is the end of the bus's link, 500 m at 10 m/s
    assert row["route_id"] == "21A" and row["eta"] == pytest.approx(50, abs=0.01)


def test_malformed_line_rejected_and_counted(client):
    setup_route(client)
    good = line("KA1", grid_point(ORIGIN, 100, 0), 10.0, 1000.0)
    r = client.post("/updates", content=f"{good}\nnot\ta\tvalid\tline\n")
    assert r.status_code == 400
    assert "accepted 1" in r.text and "rejected 1" in r.text
    c = client.get("/admin/counters", headers=admin(client)).json()
    assert c["rejected_updates"] == 1
    assert client.get("/eta", params={"stop": "Gate"}).status_code == 200


def test_offroute_is_not_an_error(client):
    setup_route(client)
    client.post("/updates", content=line("KA1", grid_point(ORIGIN, 100, 0), 10.0, 1000.0))
    r = client.post("/updates", content=line("KA1", grid_point(ORIGIN, 5000, 5000), 10.0, 1030.0))
    assert r.status_code == 200 and "offroute 1" in r.text


def test_admin_secret(client):
    assert client.get("/admin/counters").status_code == 401
    assert client.get("/admin/counters", headers={"X-Admin-Secret": "nope"}).status_code == 401
    assert client.get("/admin/counters", headers=admin(client)).status_code == 200


def test_admin_disabled_without_secret(monkeypatch):
    monkeypatch.delenv("BUSETA_ADMIN_SECRET", raising=False)
    system = System(ServiceConfig())
    with TestClient(create_app(system, run_ticker=False)) as c:
        assert c.get("/admin/counters").status_code == 403
    monkeypatch.setenv("BUSETA_ADMIN_SECRET", "env")
    system = System(ServiceConfig())
    with TestClient(create_app(system, run_ticker=False)) as c:
        assert c.get("/admin/counters", headers={"X-Admin-Secret": "env"}).status_code == 200


def test_query_endpoints(client):
    setup_route(client)
    client.post("/updates", content=line("KA1", grid_point(ORIGIN, 100, 0), 10.0, 1000.0))
    assert client.get("/eta", params={"stop": "Atlantis"}).status_code == 404
    assert client.get("/eta").status_code == 400
    sid = client.system.store.find_stops("Gate")[0].node_id
    rows = client.get("/eta", params={"stop_id": sid, "route": "21A"}).json()["rows"]
    assert len(rows) == 1
    assert client.post("/sms", content=b"ETA Gate 21A").text == "21A return 1m"
    assert client.post("/sms", content=b"ETA Atlantis").text == "unknown stop"
    trip = client.post("/trip", json={"source": "Gate", "destination": "Hostel", "desired": 0})
    assert trip.status_code == 200 and trip.json()["route_id"] == "21A"
    assert client.post("/trip", json={"source": "Gate"}).status_code == 400
    geo = client.get("/routes/21A/geometry").json()
    assert geo["route_id"] == "21A" and len(geo["links"]) == 4
    assert client.get("/routes/zz/geometry").status_code == 404
    buses = client.get("/routes/21A/buses").json()["buses"]
    assert [b["bus_id"] for b in buses] == ["KA1"]
    a = client.get("/analysis/bus/KA1").json()
    assert a["buses_used"] == ["KA1"]
    assert client.get("/analysis/route/21A").status_code == 200
    assert client.get("/analysis/bus/ghost").status_code == 404


def test_route_crud(client):
    setup_route(client)
    r = client.delete("/admin/routes/21A", headers=admin(client))
    assert r.status_code == 422  # still has a bus
    client.post("/admin/routes", params={"route": "X"}, content=square_trace(), headers=admin(client))
    assert client.delete("/admin/routes/X", headers=admin(client)).status_code == 200
    assert client.get("/routes/X/geometry").status_code == 404
    bad = client.post("/admin/routes", params={"route": "Y"}, content="1\t2", headers=admin(client))
    assert bad.status_code == 400


def test_restart_from_journal(tmp_path):
    system, clock = make_system(tmp_path)
    with TestClient(create_app(system, run_ticker=False)) as c:
        setup_route(c)
        for i in range(5):
            c.post("/updates", content=line("KA1", grid_point(ORIGIN, 100 + 100 * i, 0), 10.0, 1000.0 + 10 * i))
        before = system.store.export_snapshot()
        state = system.store.get_bus_state("KA1")
        links = [l.travel_time for l in system.store.links()]
    again, _ = make_system(tmp_path)
    assert again.store.export_snapshot() == before
    assert again.store.get_bus_state("KA1") == state
    assert [l.travel_time for l in again.store.links()] == links
    again.close()


def test_snapshot_then_journal(tmp_path):
    store = RouteStore()
    stem_loop(store)
    snap = tmp_path / "s.txt"
    store.write_snapshot(snap)
    system = System(ServiceConfig(snapshot=str(snap), journal=str(tmp_path / "j")))
    assert system.store.route_ids() == ["SL"]
    system.close()


def test_config_parsing():
    cfg = parse_config(
        "listen = 0.0.0.0:9000\neta_tick=30\ninstrumentation=off\nmatch_threshold=70\n"
        "pwl_threshold=10\ncapacity.r_server=60000\n",
        {"port": 9100, "snapshot": None},
    )
    assert (cfg.host, cfg.port, cfg.eta_tick, cfg.instrumentation) == ("0.0.0.0", 9100, 30.0, False)
    assert cfg.updater.match_threshold == 70 and cfg.pwl.error_threshold == 10
    assert cfg.capacity.r_server == 60000
    with pytest.raises(ValueError):
        parse_config("eta_tick=0")
    with pytest.raises(ValueError):
        parse_config("mystery=1")


def test_instrumentation_off():
    system = System(ServiceConfig(instrumentation=False))
    stem_loop(system.store)
    system.query.arrivals("S1", now=0)
    assert sum(system.store.counter.snapshot().values()) == 0


def test_bind_failure():
    with socket.create_server(("127.0.0.1", 0)) as s:
        port = s.getsockname()[1]
        with pytest.raises(BindFailure):
            serve(ServiceConfig(host="127.0.0.1", port=port))


def _ingest_latency(n_routes):
    system = System(ServiceConfig())
    store = system.store
    for i in range(n_routes):
        loop(store, f"R{i}", 2, 3, origin=grid_point(ORIGIN, 5000 * (i // 10), 5000 * (i % 10)))
    sim = FleetSimulator(store, SimConfig())
    for rid in store.route_ids():
        sim.place_evenly(rid, 2)
    ups = [u for u in sim.step(3600) if u.bus_id.startswith("R0-")]
    samples = []
    for u in ups:
        t0 = time.perf_counter()
        system.tracker.ingest(u)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def test_ingest_latency_independent_of_route_count():
    one = min(_ingest_latency(1) for _ in range(3))
    fifty = min(_ingest_latency(50) for _ in range(3))
    assert fifty < 3 * one


def test_ingest_not_blocked_by_eta_computation():
    system = System(ServiceConfig())
    stem_loop(system.store)
    sim = FleetSimulator(system.store, SimConfig())
    sim.add_bus("b", "SL")
    ups = sim.step(600)
    system.tracker.ingest(ups[0])
    release = threading.Event()
    entered = threading.Event()

    class Slow(LinkWalkPredictor):
        def predict(self, *a):
            entered.set()
            release.wait(5)
            return super().predict(*a)

    system.engine.predictor = Slow()
    t = threading.Thread(target=system.engine.recompute_all, args=(0.0,))
    t.start()
    assert entered.wait(5)
    t0 = time.perf_counter()
    for u in ups[1:]:
        system.tracker.ingest(u)
    elapsed = time.perf_counter() - t0
    release.set()
    t.join()
    assert elapsed < 1.0
