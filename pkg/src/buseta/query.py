"""Passenger and operator queries: arrivals, trip planning, maps, tracking, SMS."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import AmbiguousStop, NoCommonRoute, NoService, UnknownNode, UnknownStop
from .eta import EtaEngine
from .store import NodeKind, RouteStore, StopBinding

SMS_LIMIT = 160


@dataclass(frozen=True)
class ArrivalRow:
    route_id: str
    direction: str
    occurrence: int
    eta: float | None  # None means no service on this route

    @property
    def no_service(self) -> bool:
        return self.eta is None


@dataclass(frozen=True)
class TripPlan:
    route_id: str
    board_stop: int
    alight_stop: int
    board_position: int
    alight_position: int
    departure_eta: float
    arrival_eta: float
    k: int


@dataclass(frozen=True)
class SmsQuery:
    stop_name: str
    route_id: str | None = None

    def __post_init__(self):
        if not self.stop_name.strip():
            raise ValueError("stop name must not be empty")


@dataclass(frozen=True)
class BusRow:
    bus_id: str
    lat: float
    lon: float
    direction: str
    status: str
    current_link: int
    last_update_time: float


class QueryService:
    def __init__(self, store: RouteStore, engine: EtaEngine):
        self.store = store
        self.engine = engine

    # ------------------------------------------------------------------

    def resolve_stop(self, stop: str | int) -> int:
        if isinstance(stop, int):
            try:
                node = self.store.get_node(stop)
            except UnknownNode:
                raise UnknownStop(f"stop {stop}") from None
            if node.kind is not NodeKind.STOP:
                raise UnknownStop(f"node {stop} is not a stop")
            return stop
        matches = self.store.find_stops(stop.strip())
        if not matches:
            raise UnknownStop(f"no stop named {stop!r}")
        if len(matches) > 1:
            raise AmbiguousStop(stop, [n.node_id for n in matches])
        return matches[0].node_id

    def _stop_rows(self, stop: str | int) -> list[StopBinding]:
        if isinstance(stop, int):
            # a station unit knows its node id: a single access on the happy path
            try:
                rows = self.store.stop_bindings_at(stop)
            except UnknownNode:
                raise UnknownStop(f"stop {stop}") from None
            if not rows:
                self.resolve_stop(stop)
            return rows
        return self.store.stop_bindings_at(self.resolve_stop(stop))

    @staticmethod
    def _remaining(b: StopBinding, now: float) -> float | None:
        if b.eta is None:
            return None
        computed_at = now if b.computed_at is None else b.computed_at
        return max(0.0, b.eta - max(0.0, now - computed_at))

    def arrivals(self, stop: str | int, route_id: str | None = None, now: float | None = None,
                 category: str = "sms_web") -> list[ArrivalRow]:
        """ETA rows for every route occurrence at a stop, seconds from ``now``."""
        now = self.engine.clock() if now is None else now
        self.engine.ensure_fresh(now)
        with self.store.attributed(category):
            rows = self._stop_rows(stop)
        if route_id is not None:
            rows = [b for b in rows if b.route_id == route_id]
        return [ArrivalRow(b.route_id, b.direction, b.occurrence, self._remaining(b, now)) for b in rows]

    def station_fetch(self, node_id: int, now: float | None = None) -> list[ArrivalRow]:
        """What a station unit polls: every route's ETA at its own stop."""
        return self.arrivals(node_id, now=now, category="station")

    # ------------------------------------------------------------------

    def plan_trip(self, source: str | int, destination: str | int, desired: float, now: float | None = None) -> TripPlan:
        """Departure on a common route closest to, but not before, ``desired`` seconds from now."""
        now = self.engine.clock() if now is None else now
        if desired < 0:
            raise ValueError("desired time must be non-negative")
        self.engine.ensure_fresh(now)
        with self.store.attributed("sms_web"):
            src = self.resolve_stop(source)
            dst = self.resolve_stop(destination)
            if src == dst:
                raise ValueError("source and destination are the same stop")
            src_rows = self._stop_rows(src)
            dst_rows = self._stop_rows(dst)
            common = sorted({b.route_id for b in src_rows} & {b.route_id for b in dst_rows})
            if not common:
                raise NoCommonRoute(f"no route serves both stops {src} and {dst}")
            best = None
            for rid in common:
                boards = [b for b in src_rows if b.route_id == rid and b.eta is not None]
                if not boards:
                    continue
                links = self.store.links_of(rid)
                n = len(links)
                alights = [b.position for b in dst_rows if b.route_id == rid]
                for b in boards:
                    # nearest downstream occurrence of the destination
                    ahead = min(alights, key=lambda p: (p - b.position) % n)
                    ride = sum(links[(b.position + i) % n].travel_time for i in range((ahead - b.position) % n))
                    eta = self._remaining(b, now)
                    rtt = b.rtt
                    k = 0 if eta >= desired else math.ceil((desired - eta) / rtt)
                    dep = eta + k * rtt
                    if dep < desired:  # float round-off in the ceil above
                        k += 1
                        dep = eta + k * rtt
                    plan = TripPlan(rid, src, dst, b.position, ahead, dep, dep + ride, k)
                    rank = (dep - desired, plan.arrival_eta, rid)
                    if best is None or rank < best[0]:
                        best = (rank, plan)
        if best is None:
            raise NoService(f"no active bus on routes {common}")
        return best[1]

    # ------------------------------------------------------------------

    def route_geometry(self, route_id: str) -> dict:
        """Nodes, links and polyline of a route for any map renderer."""
        route = self.store.get_route(route_id)
        links = [self.store.get_link(l) for l in route.links]
        nodes = []
        for pos, link in enumerate(links):
            node = self.store.get_node(link.start_node)
            nodes.append({
                "position": pos,
                "node_id": node.node_id,
                "lat": node.position.lat,
                "lon": node.position.lon,
                "kind": node.kind.value,
                "name": node.name,
                "direction": route.direction_at(pos),
                "terminus": pos == route.terminus,
            })
        return {
            "route_id": route.route_id,
            "terminus_position": route.terminus,
            "nodes": nodes,
            "links": [
                {
                    "link_id": l.link_id,
                    "start_node": l.start_node,
                    "end_node": l.end_node,
                    "length": l.length,
                    "travel_time": l.travel_time,
                    "direction": route.direction_at(pos),
                }
                for pos, l in enumerate(links)
            ],
            "polyline": [[n["lat"], n["lon"]] for n in nodes] + [[links[0].start_pos.lat, links[0].start_pos.lon]],
        }

    def tracking_snapshot(self, route_id: str) -> list[BusRow]:
        self.store.get_route(route_id)
        return [
            BusRow(s.bus_id, s.position.lat, s.position.lon, s.direction, s.status, s.current_link, s.last_update_time)
            for s in self.store.bus_states_on_route(route_id)
        ]

    # ------------------------------------------------------------------

    def sms_parse(self, text: str) -> SmsQuery:
        words = text.split()
        if len(words) < 2 or words[0].upper() != "ETA":
            raise ValueError("expected: ETA <stop name> [route]")
        words = words[1:]
        route = None
        if len(words) > 1 and words[-1] in set(self.store.route_ids()):
            route = words.pop()
        return SmsQuery(" ".join(words), route)

    def sms_answer(self, q: SmsQuery, now: float | None = None) -> str:
        try:
            rows = self.arrivals(q.stop_name, q.route_id, now=now)
        except UnknownStop:
            return "unknown stop"
        except AmbiguousStop:
            return "ambiguous stop"
        if not rows:
            return "no service"
        lines = [format_sms_row(r) for r in rows]
        return fit_sms(lines)

    def sms_handle(self, text: str, now: float | None = None) -> str:
        try:
            q = self.sms_parse(text)
        except ValueError:
            return "usage: ETA <stop> [route]"
        return self.sms_answer(q, now)


def format_sms_row(r: ArrivalRow) -> str:
    if r.eta is None:
        return f"{r.route_id} {r.direction} no service"
    return f"{r.route_id} {r.direction} {int(r.eta / 60 + 0.5)}m"


def fit_sms(lines: list[str], limit: int = SMS_LIMIT) -> str:
    """Join rows, dropping whole trailing rows behind ``+more`` if over ``limit``."""
    text = "\n".join(lines)
    if len(text) <= limit:
        return text
    kept = []
    for line in lines:
        candidate = "\n".join(kept + [line, "+more"])
        if len(candidate) > limit:
            break
        kept.append(line)
    return "\n".join(kept + ["+more"])


def as_dict(obj) -> dict:
    return asdict(obj)
