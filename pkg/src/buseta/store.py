"""In-memory route model store.

Holds the static network (nodes, links, routes, stop bindings) and the keyed
bus tables whose semantics belong to :mod:`buseta.tracking`. Every mutation is
expressed as a journal record and applied through a single code path, so a
journal replay rebuilds exactly the same state. Store accesses made inside an
:meth:`RouteStore.attributed` block are counted per category.
"""

from __future__ import annotations

import contextlib
import contextvars
import dataclasses
import json
import logging
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import CorruptSnapshot, InvalidRoute, NotFound, OpenCircuit, UnknownBus, UnknownNode, UnknownRoute
from .geo import GeoPoint, dist

log = logging.getLogger(__name__)

NODE_MATCH_THRESHOLD_M = 25.0
GRID_CELL_DEG = 0.001  # ~111 m of latitude

ONWARD = "onward"
RETURN = "return"
VALID = "valid"
INVALID = "invalid"

COUNTER_CATEGORIES = ("link_updater", "eta_calculator", "sms_web", "station")


class NodeKind(str, Enum):
    PLAIN = "plain"
    STOP = "stop"
    POI = "poi"


@dataclass(frozen=True)
class Node:
    node_id: int
    position: GeoPoint
    name: str = ""
    kind: NodeKind = NodeKind.PLAIN


@dataclass(frozen=True)
class Link:
    link_id: int
    start_node: int
    end_node: int
    start_pos: GeoPoint
    end_pos: GeoPoint
    length: float
    travel_time: float


@dataclass(frozen=True)
class Route:
    """A closed circuit of links.

    ``terminus`` is the circuit position (index into ``links``) whose start
    node is the terminus stop. Links before it form the onward path.
    """

    route_id: str
    links: tuple[int, ...]
    terminus: int

    def direction_at(self, position: int) -> str:
        return ONWARD if position < self.terminus else RETURN


@dataclass(frozen=True)
class StopBinding:
    """One occurrence of a stop on a route's circuit, plus its latest ETA.

    ``position`` is the circuit position whose link starts at this stop;
    ``occurrence`` counts earlier appearances of the same stop on the circuit.
    """

    node_id: int
    route_id: str
    position: int
    occurrence: int
    name: str
    direction: str
    eta: float | None = None
    bus_id: str | None = None
    rtt: float | None = None
    computed_at: float | None = None


@dataclass(frozen=True)
class BusIdentity:
    bus_id: str
    route_id: str
    bus_type: str = "ordinary"


@dataclass(frozen=True)
class BusState:
    bus_id: str
    route_id: str
    position: GeoPoint
    current_speed: float
    avg_speed: float
    direction: str
    current_link: int
    link_position: int
    link_entry_time: float
    estimated_end_time: float
    status: str
    last_update_time: float
    updates: int = 1
    low_confidence: bool = False
    quarantined: int = 0


# A Bus Position Log row is a full copy of the state it recorded.
LogRecord = BusState


def _state_to_record(state: BusState) -> dict:
    rec = dataclasses.asdict(state)
    rec["position"] = [state.position.lat, state.position.lon]
    return rec


def _state_from_record(rec: dict) -> BusState:
    rec = dict(rec)
    rec["position"] = GeoPoint(*rec["position"])
    return BusState(**rec)


class QueryCounter:
    """Monotone per-category counters of store accesses."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = dict.fromkeys(COUNTER_CATEGORIES, 0)

    def increment(self, category: str, n: int = 1) -> None:
        if category not in self._counts:
            raise ValueError(f"unknown counter category {category!r}")
        with self._lock:
            self._counts[category] += n

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def __getitem__(self, category: str) -> int:
        return self._counts[category]


_category: contextvars.ContextVar[str | None] = contextvars.ContextVar("store_category", default=None)


def _grid_cell(p: GeoPoint) -> tuple[int, int]:
    return (math.floor(p.lat / GRID_CELL_DEG), math.floor(p.lon / GRID_CELL_DEG))


def _fmt_coord(x: float) -> str:
    return f"{x:.6f}"


class RouteStore:
    def __init__(self, node_threshold: float = NODE_MATCH_THRESHOLD_M, journal: str | Path | IO[str] | None = None):
        if node_threshold <= 0:
            raise ValueError("node match threshold must be positive")
        self.node_threshold = node_threshold
        self.counter = QueryCounter()
        self.instrumented = True
        self.conflicts: list[str] = []

        self._nodes: dict[int, Node] = {}
        self._grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        self._links: dict[int, Link] = {}
        self._link_by_pair: dict[tuple[int, int], int] = {}
        self._routes: dict[str, Route] = {}
        self._stops: dict[str, tuple[StopBinding, ...]] = {}
        self._buses: dict[str, BusIdentity] = {}
        self._positions: dict[str, BusState] = {}
        self._log: dict[str, list[BusState]] = defaultdict(list)
        self._next_node = 1
        self._next_link = 1

        # writes are serialized per table
        self._locks = {name: threading.RLock() for name in ("nodes", "links", "routes", "stops", "buses")}
        self._journal_lock = threading.Lock()
        self._journal: IO[str] | None = None
        self._owns_journal = False
        if journal is not None:
            self.attach_journal(journal)

    # ------------------------------------------------------------------
    # instrumentation

    @contextlib.contextmanager
    def attributed(self, category: str) -> Iterator[None]:
        """Count every store access in this block under ``category``."""
        if category not in COUNTER_CATEGORIES:
            raise ValueError(f"unknown counter category {category!r}")
        token = _category.set(category)
        try:
            yield
        finally:
            _category.reset(token)

    def _touch(self) -> None:
        cat = _category.get()
        if cat is not None and self.instrumented:
            self.counter.increment(cat)

    # ------------------------------------------------------------------
    # journal

    def attach_journal(self, journal: str | Path | IO[str]) -> None:
        if isinstance(journal, (str, Path)):
            self._journal = open(journal, "a", encoding="utf-8")
            self._owns_journal = True
        else:
            self._journal = journal
            self._owns_journal = False

    def flush(self) -> None:
        with self._journal_lock:
            if self._journal is not None:
                self._journal.flush()

    def close(self) -> None:
        with self._journal_lock:
            if self._journal is not None:
                self._journal.flush()
                if self._owns_journal:
                    self._journal.close()
                self._journal = None

    def _commit(self, record: dict) -> None:
        self._apply(record)
        with self._journal_lock:
            if self._journal is not None:
                self._journal.write(json.dumps(record, separators=(",", ":")) + "\n")

    @classmethod
    def from_journal(cls, path: str | Path, node_threshold: float = NODE_MATCH_THRESHOLD_M) -> "RouteStore":
        store = cls(node_threshold=node_threshold)
        store.replay(path)
        return store

    def replay(self, path: str | Path) -> int:
        n = 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorruptSnapshot(f"journal line {lineno}: {exc}") from None
                self._apply(record)
                n += 1
        return n

    def _apply(self, rec: dict) -> None:
        op = rec["op"]
        if op == "node":
            node = Node(rec["id"], GeoPoint(rec["lat"], rec["lon"]), rec["name"], NodeKind(rec["kind"]))
            with self._locks["nodes"]:
                is_new = node.node_id not in self._nodes
                self._nodes[node.node_id] = node
                if is_new:
                    self._grid[_grid_cell(node.position)].append(node.node_id)
                self._next_node = max(self._next_node, node.node_id + 1)
        elif op == "link":
            a, b = self._nodes[rec["start"]], self._nodes[rec["end"]]
            link = Link(rec["id"], a.node_id, b.node_id, a.position, b.position, dist(a.position, b.position), rec["tt"])
            with self._locks["links"]:
                self._links[link.link_id] = link
                self._link_by_pair[(a.node_id, b.node_id)] = link.link_id
                self._next_link = max(self._next_link, link.link_id + 1)
        elif op == "tt":
            with self._locks["links"]:
                self._links[rec["id"]] = dataclasses.replace(self._links[rec["id"]], travel_time=rec["tt"])
        elif op == "route":
            route = Route(rec["id"], tuple(rec["links"]), rec["terminus"])
            with self._locks["routes"]:
                self._routes[route.route_id] = route
            with self._locks["stops"]:
                self._stops[route.route_id] = self._bindings_for(route)
        elif op == "route_delete":
            with self._locks["routes"]:
                self._routes.pop(rec["id"], None)
            with self._locks["stops"]:
                self._stops.pop(rec["id"], None)
        elif op == "bus":
            with self._locks["buses"]:
                self._buses[rec["id"]] = BusIdentity(rec["id"], rec["route"], rec["type"])
        elif op == "state":
            state = _state_from_record(rec["state"])
            with self._locks["buses"]:
                self._positions[state.bus_id] = state
        elif op == "log":
            state = _state_from_record(rec["state"])
            with self._locks["buses"]:
                self._log[state.bus_id].append(state)
        else:
            raise CorruptSnapshot(f"unknown journal op {op!r}")

    # ------------------------------------------------------------------
    # nodes

    def _nearest_node(self, p: GeoPoint) -> tuple[float, int] | None:
        ci, cj = _grid_cell(p)
        m_per_cell_lat = GRID_CELL_DEG * math.pi / 180 * 6_371_000.0
        m_per_cell_lon = m_per_cell_lat * max(math.cos(math.radians(p.lat)), 1e-6)
        ri = math.ceil(self.node_threshold / m_per_cell_lat)
        rj = min(math.ceil(self.node_threshold / m_per_cell_lon), int(360 / GRID_CELL_DEG))
        best = None
        for i in range(ci - ri, ci + ri + 1):
            for j in range(cj - rj, cj + rj + 1):
                for nid in self._grid.get((i, j), ()):
                    d = dist(p, self._nodes[nid].position)
                    if d <= self.node_threshold and (best is None or (d, nid) < best):
                        best = (d, nid)
        return best

    def upsert_node(self, position: GeoPoint, name: str | None = None, kind: NodeKind | str = NodeKind.PLAIN) -> int:
        """Return the node within the match threshold of ``position``, creating one if none.

        A reused plain node is upgraded to the new stop/POI kind and name. An
        existing non-empty name is never overwritten; a differing name is
        recorded in :attr:`conflicts`.
        """
        kind = NodeKind(kind)
        name = (name or "").strip()
        if kind is not NodeKind.PLAIN and not name:
            raise ValueError(f"{kind.value} node needs a name")
        if "\t" in name or "\n" in name:
            raise ValueError("node names may not contain tabs or newlines")
        self._touch()
        with self._locks["nodes"]:
            hit = self._nearest_node(position)
            if hit is None:
                nid = self._next_node
                self._commit({"op": "node", "id": nid, "lat": position.lat, "lon": position.lon, "name": name, "kind": kind.value})
                return nid
            nid = hit[1]
            node = self._nodes[nid]
            new_kind, new_name = node.kind, node.name
            if kind is NodeKind.STOP or (kind is NodeKind.POI and node.kind is NodeKind.PLAIN):
                new_kind = kind
            if name:
                if not node.name:
                    new_name = name
                elif node.name != name:
                    msg = f"node {nid} named {node.name!r} also labelled {name!r}"
                    log.warning(msg)
                    self.conflicts.append(msg)
            if (new_kind, new_name) != (node.kind, node.name):
                self._commit({
                    "op": "node", "id": nid, "lat": node.position.lat, "lon": node.position.lon,
                    "name": new_name, "kind": new_kind.value,
                })
            return nid

    def get_node(self, node_id: int) -> Node:
        self._touch()
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"node {node_id}") from None

    def nodes(self) -> list[Node]:
        return [self._nodes[k] for k in sorted(self._nodes)]

    def find_stops(self, name: str) -> list[Node]:
        """Stop nodes whose name equals ``name`` exactly, else case-insensitively."""
        self._touch()
        stops = [n for n in self._nodes.values() if n.kind is NodeKind.STOP]
        exact = [n for n in stops if n.name == name]
        if exact:
            return sorted(exact, key=lambda n: n.node_id)
        folded = name.casefold()
        return sorted((n for n in stops if n.name.casefold() == folded), key=lambda n: n.node_id)

    # ------------------------------------------------------------------
    # links

    def upsert_link(self, start: int, end: int, initial_travel_time: float) -> int:
        self._touch()
        if start not in self._nodes:
            raise UnknownNode(f"node {start}")
        if end not in self._nodes:
            raise UnknownNode(f"node {end}")
        if start == end:
            raise InvalidRoute(f"link from node {start} to itself")
        with self._locks["links"]:
            existing = self._link_by_pair.get((start, end))
            if existing is not None:
                return existing
            if not initial_travel_time > 0:
                raise ValueError(f"initial travel time must be positive, got {initial_travel_time}")
            lid = self._next_link
            self._commit({"op": "link", "id": lid, "start": start, "end": end, "tt": float(initial_travel_time)})
            return lid

    def get_link(self, link_id: int) -> Link:
        self._touch()
        try:
            return self._links[link_id]
        except KeyError:
            raise NotFound(f"link {link_id}") from None

    def links(self) -> list[Link]:
        return [self._links[k] for k in sorted(self._links)]

    def blend_travel_time(self, link_id: int, sample: float, weight_prev: float) -> float:
        """Atomically replace a link's travel time by ``w*prev + (1-w)*sample``."""
        self._touch()
        with self._locks["links"]:
            prev = self._links[link_id].travel_time
            new = weight_prev * prev + (1.0 - weight_prev) * sample
            self._commit({"op": "tt", "id": link_id, "tt": new})
            return new

    def set_travel_time(self, link_id: int, travel_time: float) -> None:
        self._touch()
        if not travel_time > 0:
            raise ValueError("travel time must be positive")
        with self._locks["links"]:
            if link_id not in self._links:
                raise NotFound(f"link {link_id}")
            self._commit({"op": "tt", "id": link_id, "tt": float(travel_time)})

    # ------------------------------------------------------------------
    # routes and stops

    def _default_terminus(self, links: list[Link]) -> int:
        origin = links[0].start_pos
        best = None
        for pos in range(1, len(links)):
            node = self._nodes[links[pos].start_node]
            if node.kind is not NodeKind.STOP:
                continue
            d = dist(origin, node.position)
            if best is None or d > best[0]:
                best = (d, pos)
        if best is None:
            # no intermediate stop: fall back to the farthest node of any kind
            best = max(((dist(origin, l.start_pos), -p) for p, l in enumerate(links) if p > 0))
            return -best[1]
        return best[1]

    def put_route(self, route_id: str, link_ids: Iterable[int], terminus: int | None = None) -> Route:
        route_id = str(route_id).strip()
        if not route_id or any(c.isspace() for c in route_id):
            raise InvalidRoute(f"bad route id {route_id!r}")
        ids = tuple(link_ids)
        if len(ids) < 2:
            raise InvalidRoute("a route needs at least 2 links")
        try:
            links = [self._links[i] for i in ids]
        except KeyError as exc:
            raise NotFound(f"link {exc.args[0]}") from None
        for i, (a, b) in enumerate(zip(links, links[1:])):
            if a.end_node != b.start_node:
                raise InvalidRoute(f"links {a.link_id} and {b.link_id} (positions {i}, {i + 1}) do not chain")
        if links[-1].end_node != links[0].start_node:
            raise OpenCircuit(f"route {route_id} does not return to its first node")
        if terminus is None:
            terminus = self._default_terminus(links)
        if not 0 < terminus < len(ids):
            raise InvalidRoute(f"terminus position {terminus} outside 1..{len(ids) - 1}")
        self._touch()
        self._commit({"op": "route", "id": route_id, "links": list(ids), "terminus": terminus})
        return self._routes[route_id]

    def delete_route(self, route_id: str) -> None:
        self._touch()
        if route_id not in self._routes:
            raise UnknownRoute(f"route {route_id}")
        if any(b.route_id == route_id for b in self._buses.values()):
            raise InvalidRoute(f"route {route_id} still has registered buses")
        self._commit({"op": "route_delete", "id": route_id})

    def _bindings_for(self, route: Route) -> tuple[StopBinding, ...]:
        out = []
        seen: dict[int, int] = defaultdict(int)
        for pos, lid in enumerate(route.links):
            node = self._nodes[self._links[lid].start_node]
            if node.kind is NodeKind.STOP:
                out.append(StopBinding(node.node_id, route.route_id, pos, seen[node.node_id], node.name, route.direction_at(pos)))
                seen[node.node_id] += 1
        return tuple(out)

    def get_route(self, route_id: str) -> Route:
        self._touch()
        try:
            return self._routes[route_id]
        except KeyError:
            raise UnknownRoute(f"route {route_id}") from None

    def route_ids(self) -> list[str]:
        return sorted(self._routes)

    def links_of(self, route_id: str) -> list[Link]:
        """Ordered links of a route; one access for the route plus one per link."""
        route = self.get_route(route_id)
        return [self.get_link(lid) for lid in route.links]

    def stops_of(self, route_id: str) -> list[StopBinding]:
        self._touch()
        try:
            return list(self._stops[route_id])
        except KeyError:
            raise UnknownRoute(f"route {route_id}") from None

    def routes_through(self, node_id: int) -> list[str]:
        self._touch()
        if node_id not in self._nodes:
            raise UnknownNode(f"node {node_id}")
        return sorted(rid for rid, bs in self._stops.items() if any(b.node_id == node_id for b in bs))

    def stop_bindings_at(self, node_id: int) -> list[StopBinding]:
        """Every route occurrence (with its ETA) of one stop, in a single access."""
        self._touch()
        if node_id not in self._nodes:
            raise UnknownNode(f"node {node_id}")
        rows = [b for bs in self._stops.values() for b in bs if b.node_id == node_id]
        return sorted(rows, key=lambda b: (b.route_id, b.position))

    def publish_etas(self, route_id: str, etas: dict[int, tuple[float, str]] | None, rtt: float | None, computed_at: float) -> None:
        """Write the ETA column of a route's stop rows; ``etas`` maps circuit position to (eta, bus)."""
        self._touch()
        with self._locks["stops"]:
            rows = self._stops.get(route_id)
            if rows is None:
                raise UnknownRoute(f"route {route_id}")
            new = []
            for b in rows:
                eta, bus = (etas or {}).get(b.position, (None, None))
                new.append(dataclasses.replace(b, eta=eta, bus_id=bus, rtt=rtt, computed_at=computed_at))
            self._stops[route_id] = tuple(new)

    # ------------------------------------------------------------------
    # bus tables

    def register_bus(self, bus_id: str, route_id: str, bus_type: str = "ordinary") -> BusIdentity:
        bus_id = str(bus_id)
        if not bus_id or any(c.isspace() for c in bus_id):
            raise ValueError(f"bad bus id {bus_id!r}")
        if route_id not in self._routes:
            raise UnknownRoute(f"route {route_id}")
        self._touch()
        self._commit({"op": "bus", "id": bus_id, "route": route_id, "type": bus_type})
        return self._buses[bus_id]

    def get_bus(self, bus_id: str) -> BusIdentity:
        self._touch()
        try:
            return self._buses[bus_id]
        except KeyError:
            raise UnknownBus(f"bus {bus_id}") from None

    def bus_ids(self, route_id: str | None = None) -> list[str]:
        return sorted(b for b, ident in self._buses.items() if route_id is None or ident.route_id == route_id)

    def get_bus_state(self, bus_id: str) -> BusState | None:
        self._touch()
        return self._positions.get(bus_id)

    def put_bus_state(self, state: BusState) -> None:
        self._touch()
        self._commit({"op": "state", "state": _state_to_record(state)})

    def bus_states_on_route(self, route_id: str) -> list[BusState]:
        self._touch()
        return sorted((s for s in self._positions.values() if s.route_id == route_id), key=lambda s: s.bus_id)

    def append_log(self, state: BusState) -> None:
        self._touch()
        self._commit({"op": "log", "state": _state_to_record(state)})

    def log_of(self, bus_id: str) -> list[BusState]:
        self._touch()
        return list(self._log.get(bus_id, ()))

    # ------------------------------------------------------------------
    # snapshots

    def export_snapshot(self) -> str:
        """Serialize the network tables (and bus registry) as tab-separated text."""
        out = ["# buseta snapshot v1", "NODES"]
        for n in self.nodes():
            out.append("\t".join([str(n.node_id), _fmt_coord(n.position.lat), _fmt_coord(n.position.lon), n.kind.value, n.name]))
        out.append("LINKS")
        for l in self.links():
            out.append("\t".join([str(l.link_id), str(l.start_node), str(l.end_node), str(int(round(l.travel_time)))]))
        out.append("ROUTES")
        for rid in self.route_ids():
            r = self._routes[rid]
            out.append("\t".join([rid, str(r.terminus), ",".join(map(str, r.links))]))
        out.append("STOPS")
        for rid in self.route_ids():
            for b in self._stops[rid]:
                out.append("\t".join([str(b.node_id), rid, str(b.position), b.name]))
        out.append("BUSES")
        for bid in self.bus_ids():
            ident = self._buses[bid]
            out.append("\t".join([bid, ident.route_id, ident.bus_type]))
        return "\n".join(out) + "\n"

    def write_snapshot(self, path: str | Path) -> None:
        Path(path).write_text(self.export_snapshot(), encoding="utf-8")

    @classmethod
    def from_snapshot(cls, text: str, node_threshold: float = NODE_MATCH_THRESHOLD_M, journal=None) -> "RouteStore":
        store = cls(node_threshold=node_threshold, journal=journal)
        store.import_snapshot(text)
        return store

    @classmethod
    def load(cls, path: str | Path, **kwargs) -> "RouteStore":
        return cls.from_snapshot(Path(path).read_text(encoding="utf-8"), **kwargs)

    def import_snapshot(self, text: str) -> None:
        section = None
        stops_seen: dict[str, list[tuple[int, int]]] = defaultdict(list)
        sections = {"NODES", "LINKS", "ROUTES", "STOPS", "BUSES"}
        for lineno, raw in enumerate(text.splitlines(), 1):
            if not raw.strip() or raw.startswith("#"):
                continue
            if raw in sections:
                section = raw
                continue
            parts = raw.split("\t")
            try:
                if section == "NODES":
                    nid, lat, lon, kind = parts[:4]
                    name = parts[4] if len(parts) > 4 else ""
                    self._commit({"op": "node", "id": int(nid), "lat": float(lat), "lon": float(lon), "name": name, "kind": NodeKind(kind).value})
                elif section == "LINKS":
                    lid, a, b, tt = parts
                    if int(a) not in self._nodes or int(b) not in self._nodes:
                        raise CorruptSnapshot(f"line {lineno}: link {lid} references unknown node")
                    self._commit({"op": "link", "id": int(lid), "start": int(a), "end": int(b), "tt": float(int(tt))})
                elif section == "ROUTES":
                    rid, terminus, ids = parts
                    self.put_route(rid, [int(x) for x in ids.split(",")], int(terminus))
                elif section == "STOPS":
                    nid, rid, pos = parts[:3]
                    stops_seen[rid].append((int(nid), int(pos)))
                elif section == "BUSES":
                    bid, rid, btype = parts
                    self.register_bus(bid, rid, btype)
                else:
                    raise CorruptSnapshot(f"line {lineno}: data outside any section")
            except CorruptSnapshot:
                raise
            except (ValueError, KeyError, InvalidRoute, NotFound) as exc:
                raise CorruptSnapshot(f"line {lineno}: {exc}") from None
        for rid, rows in stops_seen.items():
            expected = [(b.node_id, b.position) for b in self._stops.get(rid, ())]
            if sorted(rows) != sorted(expected):
                raise CorruptSnapshot(f"STOPS rows for route {rid} disagree with its links")
