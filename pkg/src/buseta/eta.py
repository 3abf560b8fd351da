"""Stop arrival-time prediction from bus states and link travel times.

Bus states are aged to the computation instant first: the time since a bus's
last update is taken off its estimated time to link end.
"""

from __future__ import annotations

import dataclasses
import logging
import threading
import time
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Protocol, Sequence

from .errors import NoActiveBus, NotFound
from .store import VALID, BusState, Link, Route, RouteStore, StopBinding

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EtaEntry:
    node_id: int
    route_id: str
    occurrence: int
    position: int
    direction: str
    name: str
    eta: float
    bus_id: str
    rtt: float

    @property
    def key(self) -> tuple[int, str, int]:
        return (self.node_id, self.route_id, self.occurrence)


@dataclass(frozen=True)
class EtaTable:
    computed_at: float
    entries: Mapping[tuple[int, str, int], EtaEntry] = field(default_factory=dict)
    rtt: Mapping[str, float] = field(default_factory=dict)
    no_service: frozenset[str] = frozenset()
    failures: Mapping[str, str] = field(default_factory=dict)

    def for_route(self, route_id: str) -> list[EtaEntry]:
        return sorted((e for e in self.entries.values() if e.route_id == route_id), key=lambda e: e.position)

    def __len__(self):
        return len(self.entries)


class EtaPredictor(Protocol):
    """Maps circuit positions of stops to (seconds, source bus)."""

    def predict(self, route: Route, links: Sequence[Link], buses: Sequence[BusState],
                stop_positions: set[int]) -> dict[int, tuple[float, str]]: ...


class LinkWalkPredictor:
    """Walks the circuit once, starting at the first link holding a valid bus.

    On a link occupied by buses the running ETA becomes the smallest estimated
    time to link end among them; on an empty link the link's travel time is
    added. The running value is recorded at every stop reached.
    """

    def predict(self, route, links, buses, stop_positions):
        n = len(links)
        occupied: dict[int, BusState] = {}
        for b in buses:
            cur = occupied.get(b.link_position)
            if cur is None or (b.estimated_end_time, b.bus_id) < (cur.estimated_end_time, cur.bus_id):
                occupied[b.link_position] = b
        if not occupied:
            return {}
        rtt = sum(l.travel_time for l in links)
        first = min(occupied)
        out = {}
        eta = 0.0
        source = None
        for k in range(n):
            pos = (first + k) % n
            bus = occupied.get(pos)
            if bus is not None:
                eta = bus.estimated_end_time
                source = bus.bus_id
            else:
                eta += links[pos].travel_time
            nxt = (pos + 1) % n
            if nxt in stop_positions:
                out[nxt] = (min(max(eta, 0.0), rtt), source)
        return out


def _aged(state: BusState, now: float) -> BusState:
    """Bring a bus's time-to-link-end forward from its last update to ``now``.

    The result goes negative for a bus overdue at its link end; the walk then
    credits that time against the links that follow.
    """
    age = now - state.last_update_time
    if age <= 0:
        return state
    return dataclasses.replace(state, estimated_end_time=state.estimated_end_time - age)


class EtaEngine:
    def __init__(self, store: RouteStore, predictor: EtaPredictor | None = None,
                 tick: float = 60.0, clock=time.time):
        if not tick > 0:
            raise ValueError("tick must be positive")
        self.store = store
        self.predictor = predictor or LinkWalkPredictor()
        self.tick = tick
        self.clock = clock
        self._table: EtaTable | None = None
        self._compute_lock = threading.Lock()

    @property
    def table(self) -> EtaTable | None:
        return self._table

    def compute_eta(self, route_id: str, now: float | None = None) -> list[EtaEntry]:
        """ETA at every stop occurrence of one route; also written to the Stop table."""
        now = self.clock() if now is None else now
        with self.store.attributed("eta_calculator"):
            return self._compute(route_id, now)

    def _compute(self, route_id, now):
        route = self.store.get_route(route_id)
        links = [self.store.get_link(lid) for lid in route.links]
        buses = [_aged(b, now) for b in self.store.bus_states_on_route(route_id) if b.status == VALID]
        stops: list[StopBinding] = self.store.stops_of(route_id)
        rtt = sum(l.travel_time for l in links)
        if not buses:
            self.store.publish_etas(route_id, None, rtt, now)
            raise NoActiveBus(f"route {route_id} has no valid bus")
        predicted = self.predictor.predict(route, links, buses, {s.position for s in stops})
        self.store.publish_etas(route_id, predicted, rtt, now)
        out = []
        for s in stops:
            if s.position not in predicted:
                continue
            eta, bus = predicted[s.position]
            out.append(EtaEntry(s.node_id, route_id, s.occurrence, s.position, s.direction, s.name, eta, bus, rtt))
        return out

    def rtt(self, route_id: str) -> float:
        with self.store.attributed("eta_calculator"):
            total = sum(l.travel_time for l in self.store.links_of(route_id))
        return total

    @staticmethod
    def eta_after(entry: EtaEntry, k: int) -> float:
        """ETA ``k`` whole round trips after ``entry``."""
        if k < 0:
            raise ValueError("k must be non-negative")
        return entry.eta + k * entry.rtt

    def recompute_all(self, now: float | None = None) -> EtaTable:
        now = self.clock() if now is None else now
        with self._compute_lock:
            entries = {}
            rtts = {}
            no_service = set()
            failures = {}
            for rid in self.store.route_ids():
                try:
                    for e in self.compute_eta(rid, now):
                        entries[e.key] = e
                        rtts[rid] = e.rtt
                except NoActiveBus:
                    no_service.add(rid)
                except NotFound as exc:
                    # route deleted mid-run
                    failures[rid] = str(exc)
                except Exception as exc:  # one bad route must not stall the others
                    log.exception("ETA computation failed for route %s", rid)
                    failures[rid] = repr(exc)
            table = EtaTable(now, MappingProxyType(entries), MappingProxyType(rtts), frozenset(no_service), MappingProxyType(failures))
            self._table = table
            return table

    def ensure_fresh(self, now: float | None = None) -> EtaTable:
        """Recompute if the published table is missing or older than one tick."""
        now = self.clock() if now is None else now
        table = self._table
        if table is None or now - table.computed_at >= self.tick:
            table = self.recompute_all(now)
        return table
