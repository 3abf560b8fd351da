"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import math

from buseta.geo import GeoPoint
from buseta.store import NodeKind, RouteStore

R_EARTH = 6_371_000.0


def gc_oracle(p: GeoPoint, q: GeoPoint) -> float:
    """Great-circle distance via the angle between unit vectors (not haversine)."""
    def vec(g):
        la, lo = math.radians(g.lat), math.radians(g.lon)
        return (math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la))

    a, b = vec(p), vec(q)
    cross = (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])
    dot = sum(x * y for x, y in zip(a, b))
    return R_EARTH * math.atan2(math.sqrt(sum(c * c for c in cross)), dot)


def north_of(p: GeoPoint, meters: float) -> GeoPoint:
    """Point exactly ``meters`` due north along the meridian."""
    return GeoPoint(p.lat + math.degrees(meters / R_EARTH), p.lon)


def grid_point(origin: GeoPoint, north_m: float, east_m: float) -> GeoPoint:
    """Offset on a local lat/lon grid anchored at ``origin``."""
    dlat = math.degrees(north_m / R_EARTH)
    dlon = math.degrees(east_m / (R_EARTH * math.cos(math.radians(origin.lat))))
    return GeoPoint(origin.lat + dlat, origin.lon + dlon)


ORIGIN = GeoPoint(12.97, 77.59)


def stem_loop(store: RouteStore, route_id: str = "SL", origin: GeoPoint = ORIGIN):
    """The example circuit S1-S2-N1-N2-S3-S4-N1-S2-S1.

    S1 -> S2 -> N1 run north; N1, N2, S3, S4 form a 600 m square north of N1.
    Returns (route, {name: node_id}, [link ids in circuit order]).
    """
    coords = {
        "S1": (0, 0),
        "S2": (500, 0),
        "N1": (1000, 0),
        "N2": (1000, 600),
        "S3": (1600, 600),
        "S4": (1600, 0),
    }
    ids = {}
    for name, (n, e) in coords.items():
        kind = NodeKind.STOP if name.startswith("S") else NodeKind.PLAIN
        ids[name] = store.upsert_node(grid_point(origin, n, e), name if kind is NodeKind.STOP else None, kind)
    seq = ["S1", "S2", "N1", "N2", "S3", "S4", "N1", "S2", "S1"]
    links = [store.upsert_link(ids[a], ids[b], 60.0) for a, b in zip(seq, seq[1:])]
    route = store.put_route(route_id, links)
    return route, ids, links


def loop(store: RouteStore, route_id: str, north: int, east: int, link_m: float = 600.0,
         origin: GeoPoint = ORIGIN, stop_every: int = 1, initial_tt: float | None = None):
    """Rectangular circuit of 2*(north+east) links of ``link_m`` meters each.

    Every ``stop_every``-th node is a stop named ``<route>-<i>``.
    """
    cells = [(i, 0) for i in range(north)] + [(north, j) for j in range(east)] + \
            [(north - i, east) for i in range(north)] + [(0, east - j) for j in range(east)]
    ids = []
    for k, (i, j) in enumerate(cells):
        p = grid_point(origin, i * link_m, j * link_m)
        if k % stop_every == 0:
            ids.append(store.upsert_node(p, f"{route_id}-{k}", NodeKind.STOP))
        else:
            ids.append(store.upsert_node(p))
    tt = initial_tt if initial_tt is not None else link_m / 10.0
    links = [store.upsert_link(ids[k], ids[(k + 1) % len(ids)], tt) for k in range(len(ids))]
    return store.put_route(route_id, links)


def place_bus(store: RouteStore, bus_id: str, route_id: str, position: int, est_end: float,
              status: str = "valid", t: float = 0.0):
    """Put a bus directly onto a circuit position with a chosen time-to-link-end."""
    from buseta.store import BusState

    route = store.get_route(route_id)
    if bus_id not in store.bus_ids():
        store.register_bus(bus_id, route_id)
    link = store.get_link(route.links[position])
    state = BusState(bus_id, route_id, link.start_pos, 10.0, 10.0, route.direction_at(position),
                     link.link_id, position, t, float(est_end), status, t)
    store.put_bus_state(state)
    return state


def forward_oracle(travel_times: list[float], buses: dict[int, list[float]], stop_positions) -> dict[int, float]:
    """Simulate every bus forward link by link; each stop gets the earliest arrival.

    ``buses`` maps a circuit position to the time-to-link-end of each bus on it.
    A stop at position q is the start node of link q.
    """
    n = len(travel_times)
    best: dict[int, float] = {}
    for p, ees in buses.items():
        for ee in ees:
            t = ee
            pos = (p + 1) % n  # the bus reaches the start of this link at time t
            for _ in range(n):
                if pos in stop_positions and (pos not in best or t < best[pos]):
                    best[pos] = t
                t += travel_times[pos]
                pos = (pos + 1) % n
    return best


# one (label, passed, detail) per acceptance check, reported at session end
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


class criterion:
    """Record the outcome of the enclosed block as one PASS/FAIL line."""

    def __init__(self, label: str):
        self.label = label

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = "" if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE_RESULTS.append((self.label, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'} {self.label}{'  -- ' + detail if detail else ''}")
        return False
