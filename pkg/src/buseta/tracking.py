"""Live bus state: position ingest, link travel-time updates and direction.

Each accepted :class:`PositionUpdate` is map-matched to the first route link
(scanning forward from the bus's current link) whose linearity error against
the reported position is below the match threshold. When the bus has moved on,
the time spent since entering its previous link is split over the completed
links in proportion to their lengths and blended into each link's stored
travel time.

The bus's own link is skipped when the update shows it must already be past
that link's end: its progress along the link went backwards, or it covered
more ground than it had left. This keeps a bus that turns back on a two-way
street from being pinned to the inbound link.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

from .errors import InsufficientHistory, NotFound, OffRoute, StaleTimestamp, UnknownBus, UnknownRoute
from .geo import GeoPoint, dist, linearity_error
from .store import (
    INVALID,
    ONWARD,
    RETURN,
    VALID,
    BusIdentity,
    BusState,
    LogRecord,
    Node,
    NodeKind,
    RouteStore,
)

log = logging.getLogger(__name__)

__all__ = [
    "BusIdentity",
    "BusState",
    "FleetTracker",
    "LogRecord",
    "PositionUpdate",
    "UpdaterConfig",
    "format_update",
    "parse_update",
]


@dataclass(frozen=True)
class PositionUpdate:
    bus_id: str
    position: GeoPoint
    speed: float
    timestamp: float
    breakdown: bool = False


@dataclass(frozen=True)
class UpdaterConfig:
    match_threshold: float = 60.0
    vel_weight_prev: float = 0.9
    tt_weight_prev: float = 0.7
    next_stop_radius: float = 50.0
    # positions closer than this to a stop count as having reached it
    at_stop_radius: float = 5.0
    # used in place of a zero average speed when estimating time to link end
    min_speed: float = 1.0

    def __post_init__(self):
        for name in ("vel_weight_prev", "tt_weight_prev"):
            w = getattr(self, name)
            if not 0.0 < w < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {w}")
        for name in ("match_threshold", "next_stop_radius", "at_stop_radius", "min_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def parse_update(line: str) -> PositionUpdate:
    """Parse ``bus_id<TAB>lat<TAB>lon<TAB>speed_mps<TAB>unix_seconds<TAB>0|1``."""
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 6:
        raise ValueError(f"expected 6 tab-separated fields, got {len(parts)}")
    bus_id, lat, lon, speed, ts, flag = parts
    if not bus_id:
        raise ValueError("empty bus id")
    if flag not in ("0", "1"):
        raise ValueError(f"breakdown flag must be 0 or 1, got {flag!r}")
    speed_v = float(speed)
    if not speed_v >= 0:
        raise ValueError(f"negative or invalid speed {speed!r}")
    return PositionUpdate(bus_id, GeoPoint(float(lat), float(lon)), speed_v, float(ts), flag == "1")


def format_update(u: PositionUpdate) -> str:
    return "\t".join([
        u.bus_id, repr(u.position.lat), repr(u.position.lon), repr(u.speed), repr(u.timestamp),
        "1" if u.breakdown else "0",
    ])


@dataclass(frozen=True)
class Analysis:
    trips: int
    total_distance: float
    buses_used: frozenset[str]
    quarantined: int = 0


class FleetTracker:
    def __init__(self, store: RouteStore, config: UpdaterConfig | None = None):
        self.store = store
        self.config = config or UpdaterConfig()
        self._bus_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._identity_cache: dict[str, BusIdentity] = {}
        self._subscribers: list[Callable[[BusState], None]] = []
        self.offroute_count = 0

    def subscribe(self, callback: Callable[[BusState], None]) -> None:
        """Call ``callback(state)`` after every accepted update."""
        self._subscribers.append(callback)

    def register_bus(self, bus_id: str, route_id: str, bus_type: str = "ordinary") -> BusIdentity:
        ident = self.store.register_bus(bus_id, route_id, bus_type)
        self._identity_cache.pop(ident.bus_id, None)
        return ident

    def _lock_for(self, bus_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._bus_locks[bus_id]

    def _identity(self, bus_id: str) -> BusIdentity:
        # the Bus table is static, so one read per bus is enough
        ident = self._identity_cache.get(bus_id)
        if ident is None:
            ident = self.store.get_bus(bus_id)
            self._identity_cache[bus_id] = ident
        return ident

    def ingest(self, update: PositionUpdate) -> BusState:
        with self._lock_for(update.bus_id), self.store.attributed("link_updater"):
            return self._ingest(update)

    def _ingest(self, u: PositionUpdate) -> BusState:
        cfg = self.config
        store = self.store
        ident = self._identity(u.bus_id)
        prev = store.get_bus_state(u.bus_id)
        if prev is not None and u.timestamp < prev.last_update_time:
            raise StaleTimestamp(f"bus {u.bus_id}: update at {u.timestamp} precedes {prev.last_update_time}")
        route = store.get_route(ident.route_id)
        if prev is not None and prev.route_id != route.route_id:
            prev = None  # bus moved to another route; start afresh
        n = len(route.links)

        # pass 1: first link at or ahead of the current one that matches
        start = prev.link_position if prev is not None else 0
        crossed = []
        match = None
        fallback = None
        for k in range(n):
            pos = (start + k) % n
            link = store.get_link(route.links[pos])
            on_link = linearity_error(link.start_pos, u.position, link.end_pos) < cfg.match_threshold
            if k == 0 and prev is not None and _left_link(link, prev, u, cfg.match_threshold):
                # the bus must be past this link's end even if its position still
                # lies on it: a two-way street where it turned back
                if on_link:
                    fallback = (pos, link)
                crossed.append(link)
                continue
            if on_link:
                match = (pos, link)
                break
            crossed.append(link)
        if match is None and fallback is not None:
            match, crossed = fallback, []
        if match is None:
            self.offroute_count += 1
            if prev is not None:
                store.put_bus_state(dataclasses.replace(prev, last_update_time=u.timestamp, quarantined=prev.quarantined + 1))
            raise OffRoute(u.bus_id, u.position)
        pos, link = match

        # pass 2: average speed and completed-link travel times
        if prev is None:
            avg = u.speed
        else:
            avg = cfg.vel_weight_prev * prev.avg_speed + (1.0 - cfg.vel_weight_prev) * u.speed
        entry = u.timestamp
        if prev is not None:
            entry = prev.link_entry_time
            if pos != prev.link_position:
                elapsed = u.timestamp - prev.link_entry_time
                for completed, raw in zip(crossed, split_elapsed(elapsed, [l.length for l in crossed])):
                    if raw > 0:
                        store.blend_travel_time(completed.link_id, raw, cfg.tt_weight_prev)
                entry = u.timestamp

        low = avg < cfg.min_speed
        est_end = dist(u.position, link.end_pos) / max(avg, cfg.min_speed)
        state = BusState(
            bus_id=u.bus_id,
            route_id=route.route_id,
            position=u.position,
            current_speed=u.speed,
            avg_speed=avg,
            direction=route.direction_at(pos),
            current_link=link.link_id,
            link_position=pos,
            link_entry_time=entry,
            estimated_end_time=est_end,
            status=INVALID if u.breakdown else VALID,
            last_update_time=u.timestamp,
            updates=(prev.updates + 1) if prev is not None else 1,
            low_confidence=low,
            quarantined=prev.quarantined if prev is not None else 0,
        )
        store.put_bus_state(state)
        store.append_log(state)
        for cb in self._subscribers:
            try:
                cb(state)
            except Exception:
                log.exception("state subscriber failed")
        return state

    def state(self, bus_id: str) -> BusState:
        self._identity(bus_id)
        s = self.store.get_bus_state(bus_id)
        if s is None:
            raise NotFound(f"bus {bus_id} has not reported a position")
        return s

    def infer_direction(self, bus_id: str) -> str:
        s = self.store.get_bus_state(bus_id)
        if s is None:
            self._identity(bus_id)
        if s is None or s.updates < 2:
            raise InsufficientHistory(f"bus {bus_id} needs at least 2 accepted updates")
        return s.direction

    def next_stop(self, bus_id: str) -> tuple[Node, bool] | None:
        """Next stop ahead of the bus and whether it is within announcement range."""
        s = self.state(bus_id)
        route = self.store.get_route(s.route_id)
        n = len(route.links)
        for k in range(n):
            pos = (s.link_position + k) % n
            link = self.store.get_link(route.links[pos])
            node = self.store.get_node(link.end_node)
            if node.kind is not NodeKind.STOP:
                continue
            d = dist(s.position, node.position)
            if k == 0 and d <= self.config.at_stop_radius:
                continue  # already at this stop
            return node, d <= self.config.next_stop_radius
        return None

    def analysis(self, bus_id: str | None = None, route_id: str | None = None,
                 start: float | None = None, end: float | None = None) -> Analysis:
        """Trips (return-to-onward flips) and distance from the position log."""
        if (bus_id is None) == (route_id is None):
            raise ValueError("give exactly one of bus_id or route_id")
        if bus_id is not None:
            self._identity(bus_id)
            buses = [bus_id]
        else:
            if route_id not in self.store.route_ids():
                raise UnknownRoute(f"route {route_id}")
            buses = self.store.bus_ids(route_id)
        trips = 0
        total = 0.0
        used = set()
        quarantined = 0
        for b in buses:
            records = [
                r for r in self.store.log_of(b)
                if (start is None or r.last_update_time >= start) and (end is None or r.last_update_time <= end)
                and (route_id is None or r.route_id == route_id)
            ]
            if not records:
                continue
            used.add(b)
            quarantined += records[-1].quarantined
            for a, c in zip(records, records[1:]):
                total += dist(a.position, c.position)
                if a.direction == RETURN and c.direction == ONWARD:
                    trips += 1
        if not used:
            raise NotFound(f"no log records for {'bus ' + bus_id if bus_id else 'route ' + route_id}")
        return Analysis(trips, total, frozenset(used), quarantined)


def _left_link(link, prev: BusState, u: PositionUpdate, slack: float) -> bool:
    """Whether the bus has certainly finished ``link`` since its previous update.

    Either its progress along the link went backwards by more than ``slack``
    meters, or the distance it covered at the lower of its two reported speeds
    exceeds what it had left to go on the link.
    """
    if dist(link.start_pos, u.position) < dist(link.start_pos, prev.position) - slack:
        return True
    covered = min(prev.current_speed, u.speed) * (u.timestamp - prev.last_update_time)
    return covered > dist(prev.position, link.end_pos)


def split_elapsed(elapsed: float, lengths: list[float]) -> list[float]:
    """Share ``elapsed`` seconds over links in proportion to their lengths."""
    total = math.fsum(lengths)
    if not lengths or total <= 0:
        return [0.0] * len(lengths)
    # Parts are multiples of ulp(elapsed), so every partial sum is exact and
    # the last link's remainder makes them add up to elapsed bit for bit.
    q = math.ulp(elapsed)
    parts = [round(elapsed * d / total / q) * q for d in lengths[:-1]]
    parts.append(elapsed - sum(parts))
    return parts


def update_from_log(record: LogRecord) -> PositionUpdate:
    """Rebuild the update that produced a log record (for replay)."""
    return PositionUpdate(record.bus_id, record.position, record.current_speed, record.last_update_time, record.status == INVALID)
