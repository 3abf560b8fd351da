"""Turn a recorded GPS trace into an optimized node/link route.

A trace is driven once around the full circuit (onward then return). Points
are thinned with a piece-wise linear approximation driven by the accumulated
linearity error; labelled stops and POIs always survive. The kept points are
then merged into the store, reusing nearby nodes and existing links so that
travel-time estimates are shared between routes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidRoute, NonMonotoneTimestamps, OpenCircuit, TraceTooShort
from .geo import GeoPoint, linearity_error
from .store import NodeKind, Route, RouteStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TracePoint:
    position: GeoPoint
    timestamp: float
    label_kind: NodeKind | None = None
    label: str | None = None

    @property
    def labeled(self) -> bool:
        return self.label_kind is not None


@dataclass(frozen=True)
class PwlConfig:
    error_threshold: float = 25.0

    def __post_init__(self):
        if not self.error_threshold > 0:
            raise ValueError("error_threshold must be positive")


def parse_trace(lines: Iterable[str]) -> list[TracePoint]:
    """Parse ``lat<TAB>lon<TAB>unix_seconds[<TAB>stop|poi<TAB>name]`` lines."""
    points = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 5):
            raise ValueError(f"trace line {lineno}: expected 3 or 5 tab-separated fields, got {len(parts)}")
        try:
            pos = GeoPoint(float(parts[0]), float(parts[1]))
            ts = float(parts[2])
        except ValueError as exc:
            raise ValueError(f"trace line {lineno}: {exc}") from None
        kind = name = None
        if len(parts) == 5:
            try:
                kind = NodeKind(parts[3].strip().lower())
            except ValueError:
                raise ValueError(f"trace line {lineno}: label kind must be stop or poi") from None
            if kind is NodeKind.PLAIN:
                raise ValueError(f"trace line {lineno}: label kind must be stop or poi")
            name = parts[4].strip()
            if not name:
                raise ValueError(f"trace line {lineno}: empty label name")
        points.append(TracePoint(pos, ts, kind, name))
    return points


def read_trace(path: str | Path) -> list[TracePoint]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh)


def format_trace(points: Iterable[TracePoint]) -> str:
    out = []
    for p in points:
        fields = [f"{p.position.lat:.6f}", f"{p.position.lon:.6f}", f"{p.timestamp:g}"]
        if p.labeled:
            fields += [p.label_kind.value, p.label]
        out.append("\t".join(fields))
    return "\n".join(out) + "\n"


def collapse_duplicates(trace: Sequence[TracePoint]) -> list[TracePoint]:
    """Drop consecutive samples at an identical position, keeping the first.

    A label on a dropped duplicate moves onto the retained sample.
    """
    out: list[TracePoint] = []
    for p in trace:
        if out and out[-1].position == p.position:
            if p.labeled and not out[-1].labeled:
                prev = out[-1]
                out[-1] = TracePoint(prev.position, prev.timestamp, p.label_kind, p.label)
            continue
        out.append(p)
    return out


def _check_trace(trace: Sequence[TracePoint]) -> None:
    if len(trace) < 2:
        raise TraceTooShort(f"trace has {len(trace)} point(s), need at least 2")
    for a, b in zip(trace, trace[1:]):
        if not b.timestamp > a.timestamp:
            raise NonMonotoneTimestamps(f"timestamp {b.timestamp} does not follow {a.timestamp}")


def simplify(trace: Sequence[TracePoint], cfg: PwlConfig = PwlConfig()) -> list[TracePoint]:
    """Keep the critical points of a trace.

    Slides a triple (anchor, candidate, next) along the trace, where the anchor
    is the last kept point. The candidate is kept when it is labelled or when
    the linearity error accumulated since the anchor exceeds the threshold;
    keeping it resets the accumulator and makes it the new anchor. The first
    and last points are always kept.
    """
    _check_trace(trace)
    pts = collapse_duplicates(trace)
    if len(pts) < 2:
        raise TraceTooShort("trace collapses to a single position")
    kept = [pts[0]]
    n0, n1 = pts[0], pts[1]
    err = 0.0
    for n2 in pts[2:]:
        err += linearity_error(n0.position, n1.position, n2.position)
        if n1.labeled or err > cfg.error_threshold:
            kept.append(n1)
            err = 0.0
            n0 = n1
        n1 = n2
    kept.append(pts[-1])
    return kept


def build_route(route_id: str, kept: Sequence[TracePoint], store: RouteStore, terminus: int | None = None) -> Route:
    """Merge simplified points into the store as nodes, links and a route row."""
    if len(kept) < 2:
        raise TraceTooShort("need at least 2 kept points")
    node_ids: list[int] = []
    times: list[float] = []
    for p in kept:
        kind = p.label_kind or NodeKind.PLAIN
        nid = store.upsert_node(p.position, p.label, kind)
        if node_ids and node_ids[-1] == nid:
            # two kept points snapped onto one node; the first timestamp stands
            continue
        node_ids.append(nid)
        times.append(p.timestamp)
    if node_ids[-1] != node_ids[0]:
        raise OpenCircuit(
            f"route {route_id}: trace ends more than {store.node_threshold:g} m from its start"
        )
    if len(node_ids) < 3:
        raise InvalidRoute(f"route {route_id}: circuit collapses to fewer than 2 links")
    link_ids = [
        store.upsert_link(a, b, t1 - t0)
        for a, b, t0, t1 in zip(node_ids, node_ids[1:], times, times[1:])
    ]
    route = store.put_route(route_id, link_ids, terminus)
    log.info("route %s: %d trace points -> %d links", route_id, len(kept), len(link_ids))
    return route


def create_route_from_trace(route_id: str, trace: Sequence[TracePoint], cfg: PwlConfig | None, store: RouteStore) -> Route:
    return build_route(route_id, simplify(trace, cfg or PwlConfig()), store)
