"""Deterministic fleet simulator standing in for on-vehicle GPS units.

Buses move along the stored route polylines on a virtual clock and emit
:class:`~buseta.tracking.PositionUpdate` records at a fixed rate. Ground-truth
stop arrivals come from the continuous motion, never from the sampled updates.
"""

from __future__ import annotations

import heapq
import logging
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import OffRoute, UnknownRoute
from .eta import EtaEngine
from .geo import EARTH_RADIUS_M, GeoPoint, interpolate
from .store import Link, RouteStore
from .tracking import FleetTracker, PositionUpdate

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    seed: int = 0
    update_rate: float = 2.0  # updates per minute per bus
    speed: float = 10.0  # m/s
    link_speeds: dict[int, float] = field(default_factory=dict)
    gps_noise_sigma: float = 0.0
    breakdowns: list[tuple[str, float, float]] = field(default_factory=list)  # (bus, start, duration)
    dwell_time: float = 0.0
    start_time: float = 0.0

    def __post_init__(self):
        if not self.update_rate > 0:
            raise ValueError("update_rate must be positive")
        if not self.speed > 0 or any(not v > 0 for v in self.link_speeds.values()):
            raise ValueError("speeds must be positive")
        if self.gps_noise_sigma < 0 or self.dwell_time < 0:
            raise ValueError("noise sigma and dwell time must be non-negative")

    @property
    def update_interval(self) -> float:
        return 60.0 / self.update_rate


class SimTruth:
    """Actual arrival times per bus at each stop occurrence (circuit position)."""

    def __init__(self):
        self._arrivals: dict[str, list[tuple[float, int]]] = defaultdict(list)

    def record(self, bus_id: str, t: float, position: int) -> None:
        self._arrivals[bus_id].append((t, position))

    def arrivals(self, bus_id: str) -> list[tuple[float, int]]:
        return list(self._arrivals.get(bus_id, ()))

    def times(self, bus_id: str, position: int) -> list[float]:
        return [t for t, p in self._arrivals.get(bus_id, ()) if p == position]

    def as_rows(self) -> list[tuple[str, float, int]]:
        return [(b, t, p) for b in sorted(self._arrivals) for t, p in self._arrivals[b]]


@dataclass
class _Bus:
    bus_id: str
    route_id: str
    links: list[Link]
    stops: frozenset[int]
    pos: int
    offset: float
    t: float
    phase: float
    windows: list[tuple[float, float]]
    dwell_left: float = 0.0
    emitted: int = 0
    circuits: int = 0


class FleetSimulator:
    def __init__(self, store: RouteStore, config: SimConfig | None = None):
        self.store = store
        self.config = config or SimConfig()
        self.now = self.config.start_time
        self.truth = SimTruth()
        self._rng = random.Random(self.config.seed)
        self._buses: dict[str, _Bus] = {}
        self._order: list[str] = []

    @property
    def bus_ids(self) -> list[str]:
        return list(self._order)

    def add_bus(self, bus_id: str, route_id: str, position: int = 0, offset: float = 0.0,
                phase: float = 0.0, bus_type: str = "ordinary") -> None:
        """Place a bus ``offset`` meters into the link at circuit ``position``."""
        if route_id not in self.store.route_ids():
            raise UnknownRoute(f"route {route_id}")
        if bus_id in self._buses:
            raise ValueError(f"bus {bus_id} already simulated")
        route = self.store.get_route(route_id)
        links = [self.store.get_link(l) for l in route.links]
        stops = frozenset(b.position for b in self.store.stops_of(route_id))
        if not 0 <= position < len(links) or not 0 <= offset < links[position].length:
            raise ValueError("start position outside the route")
        if bus_id not in self.store.bus_ids():
            self.store.register_bus(bus_id, route_id, bus_type)
        windows = sorted(
            (s, s + d) for b, s, d in self.config.breakdowns if b == bus_id and d > 0
        )
        bus = _Bus(bus_id, route_id, links, stops, position, offset, self.now, phase % self.config.update_interval, windows)
        if offset == 0.0 and position in stops:
            self.truth.record(bus_id, self.now, position)
            bus.dwell_left = self.config.dwell_time
        self._buses[bus_id] = bus
        self._order.append(bus_id)

    def place_evenly(self, route_id: str, n: int, prefix: str | None = None, stagger: bool = True) -> list[str]:
        """Add ``n`` buses spread evenly by distance around a route's circuit."""
        route = self.store.get_route(route_id)
        lengths = [self.store.get_link(l).length for l in route.links]
        total = sum(lengths)
        ids = []
        for i in range(n):
            target = total * i / n
            pos, acc = 0, 0.0
            while acc + lengths[pos] <= target and pos < len(lengths) - 1:
                acc += lengths[pos]
                pos += 1
            bus_id = f"{prefix or route_id}-{i + 1}"
            phase = self.config.update_interval * i / n if stagger else 0.0
            self.add_bus(bus_id, route_id, pos, target - acc, phase)
            ids.append(bus_id)
        return ids

    def set_speed(self, speed: float, link_speeds: dict[int, float] | None = None) -> None:
        """Change speeds from the current simulated instant on."""
        if not speed > 0:
            raise ValueError("speed must be positive")
        self.config.speed = speed
        if link_speeds is not None:
            self.config.link_speeds = dict(link_speeds)

    def circuit_time(self, route_id: str) -> float:
        route = self.store.get_route(route_id)
        return sum(self.store.get_link(l).length / self._speed(l) for l in route.links) + \
            self.config.dwell_time * len(self.store.stops_of(route_id))

    # ------------------------------------------------------------------
    # motion

    def _speed(self, link_id: int) -> float:
        return self.config.link_speeds.get(link_id, self.config.speed)

    @staticmethod
    def _window_at(bus: _Bus, t: float) -> tuple[float, float] | None:
        for s, e in bus.windows:
            if s <= t < e:
                return (s, e)
        return None

    def _advance(self, bus: _Bus, target: float) -> None:
        while bus.t < target:
            win = self._window_at(bus, bus.t)
            if win is not None:
                bus.t = min(win[1], target)
                continue
            upcoming = [s for s, _ in bus.windows if s > bus.t]
            self._move(bus, min([target] + upcoming))

    def _move(self, bus: _Bus, target: float) -> None:
        n = len(bus.links)
        while bus.t < target:
            if bus.dwell_left > 0:
                use = min(bus.dwell_left, target - bus.t)
                bus.dwell_left -= use
                bus.t += use
                continue
            link = bus.links[bus.pos]
            v = self._speed(link.link_id)
            to_end = (link.length - bus.offset) / v
            if bus.t + to_end <= target:
                bus.t += to_end
                bus.pos = (bus.pos + 1) % n
                bus.offset = 0.0
                if bus.pos == 0:
                    bus.circuits += 1
                if bus.pos in bus.stops:
                    self.truth.record(bus.bus_id, bus.t, bus.pos)
                    bus.dwell_left = self.config.dwell_time
            else:
                bus.offset += v * (target - bus.t)
                bus.t = target

    def _emit(self, bus: _Bus) -> PositionUpdate:
        link = bus.links[bus.pos]
        broken = self._window_at(bus, bus.t) is not None
        moving = not broken and bus.dwell_left <= 0
        p = interpolate(link.start_pos, link.end_pos, bus.offset / link.length)
        sigma = self.config.gps_noise_sigma
        if sigma > 0:
            dn = self._rng.gauss(0.0, sigma)
            de = self._rng.gauss(0.0, sigma)
            lat = p.lat + math.degrees(dn / EARTH_RADIUS_M)
            lon = p.lon + math.degrees(de / (EARTH_RADIUS_M * math.cos(math.radians(p.lat))))
            p = GeoPoint(max(-90.0, min(90.0, lat)), (lon + 540.0) % 360.0 - 180.0)
        speed = self._speed(link.link_id) if moving else 0.0
        return PositionUpdate(bus.bus_id, p, speed, bus.t, broken)

    def _next_emit(self, bus: _Bus) -> float:
        return self.config.start_time + bus.phase + bus.emitted * self.config.update_interval

    def step(self, dt: float) -> list[PositionUpdate]:
        """Advance the clock by ``dt`` seconds; return updates emitted in time order."""
        if dt < 0:
            raise ValueError("dt must be non-negative")
        end = self.now + dt
        heap = []
        for i, bid in enumerate(self._order):
            bus = self._buses[bid]
            heapq.heappush(heap, (self._next_emit(bus), i, bid))
        out = []
        while heap and heap[0][0] <= end:
            t, i, bid = heapq.heappop(heap)
            bus = self._buses[bid]
            if t < bus.t:  # emission instant already behind us
                bus.emitted += 1
                heapq.heappush(heap, (self._next_emit(bus), i, bid))
                continue
            self._advance(bus, t)
            out.append(self._emit(bus))
            bus.emitted += 1
            heapq.heappush(heap, (self._next_emit(bus), i, bid))
        for bid in self._order:
            self._advance(self._buses[bid], end)
        self.now = end
        return out


# ----------------------------------------------------------------------
# closed loop


@dataclass
class AccuracyReport:
    errors: dict[tuple[str, str, int], list[float]]
    samples: int
    skipped: int
    offroute: int
    updates: int

    @property
    def max_error(self) -> float:
        return max((max(v) for v in self.errors.values() if v), default=0.0)

    def format(self) -> str:
        lines = ["# route\tstop\toccurrence\tn\tp50\tp90\tmax"]
        for (rid, name, occ), errs in sorted(self.errors.items()):
            if not errs:
                continue
            s = sorted(errs)
            lines.append("\t".join([
                rid, name, str(occ), str(len(s)),
                f"{_quantile(s, 0.5):.1f}", f"{_quantile(s, 0.9):.1f}", f"{s[-1]:.1f}",
            ]))
        lines.append(f"# samples={self.samples} skipped={self.skipped} updates={self.updates} offroute={self.offroute} max={self.max_error:.1f}")
        return "\n".join(lines) + "\n"


def _quantile(sorted_values: list[float], q: float) -> float:
    idx = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[idx]


def run_closed_loop(sim: FleetSimulator, duration: float, tracker: FleetTracker, engine: EtaEngine,
                    warmup: float = 0.0, tick: float | None = None) -> AccuracyReport:
    """Drive ingest and ETA recomputation from the simulator and score the ETAs.

    Each published ETA names the bus expected to arrive; its error is measured
    against that bus's nearest actual arrival at the same stop occurrence.
    Predictions reaching past the end of the run are skipped.
    """
    tick = engine.tick if tick is None else tick
    start = sim.now
    samples = []
    offroute = 0
    n_updates = 0
    steps = math.ceil(duration / tick)
    for _ in range(steps):
        for u in sim.step(tick):
            n_updates += 1
            try:
                tracker.ingest(u)
            except OffRoute:
                offroute += 1
        table = engine.recompute_all(sim.now)
        if sim.now - start >= warmup:
            samples.extend((table.computed_at, e) for e in table.entries.values())
    end = sim.now
    horizon = end - 2 * sim.config.update_interval
    errors: dict[tuple[str, str, int], list[float]] = defaultdict(list)
    skipped = 0
    for t_c, e in samples:
        predicted = t_c + e.eta
        actual = sim.truth.times(e.bus_id, e.position)
        if predicted > horizon or not actual:
            skipped += 1
            continue
        errors[(e.route_id, e.name, e.occurrence)].append(min(abs(predicted - a) for a in actual))
    return AccuracyReport(dict(errors), len(samples) - skipped, skipped, offroute, n_updates)
