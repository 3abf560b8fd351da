"""HTTP surface: vehicle ingest, passenger queries and admin endpoints."""

from __future__ import annotations

import dataclasses
import logging
import os
import secrets
import socket
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import Body, FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .capacity import LoadParams, load_params
from .errors import (
    AmbiguousStop,
    BindFailure,
    BusEtaError,
    InvalidRoute,
    NoCommonRoute,
    NoData,
    NoService,
    NotFound,
    OffRoute,
    StaleTimestamp,
)
from .eta import EtaEngine
from .query import QueryService
from .route_creator import PwlConfig, create_route_from_trace, parse_trace
from .store import RouteStore
from .tracking import FleetTracker, UpdaterConfig, parse_update

log = logging.getLogger(__name__)

ADMIN_SECRET_ENV = "BUSETA_ADMIN_SECRET"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    eta_tick: float = 60.0
    snapshot: str | None = None
    journal: str | None = None
    instrumentation: bool = True
    admin_secret: str | None = None
    node_threshold: float = 25.0
    updater: UpdaterConfig = field(default_factory=UpdaterConfig)
    pwl: PwlConfig = field(default_factory=PwlConfig)
    capacity: LoadParams = field(default_factory=LoadParams)

    def __post_init__(self):
        if not self.eta_tick > 0:
            raise ValueError("eta tick must be positive")


_UPDATER_KEYS = {f.name for f in dataclasses.fields(UpdaterConfig)}


def _as_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "on", "true", "yes"):
        return True
    if v in ("0", "off", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_config(text: str = "", overrides: dict[str, str] | None = None) -> ServiceConfig:
    """Build a config from ``key=value`` lines, then apply ``overrides``.

    Updater parameters use their field names (``match_threshold``...), the PWL
    threshold is ``pwl_threshold`` and capacity parameters take a
    ``capacity.`` prefix.
    """
    pairs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    pairs += [(k, str(v)) for k, v in (overrides or {}).items() if v is not None]

    cfg = ServiceConfig()
    updater = {}
    capacity_lines = []
    for k, v in pairs:
        if k == "listen":
            host, _, port = v.rpartition(":")
            cfg.host, cfg.port = host or cfg.host, int(port)
        elif k in ("host", "snapshot", "journal", "admin_secret"):
            setattr(cfg, k, v)
        elif k == "port":
            cfg.port = int(v)
        elif k in ("eta_tick", "node_threshold"):
            setattr(cfg, k, float(v))
        elif k == "instrumentation":
            cfg.instrumentation = _as_bool(v)
        elif k == "pwl_threshold":
            cfg.pwl = PwlConfig(float(v))
        elif k in _UPDATER_KEYS:
            updater[k] = float(v)
        elif k.startswith("capacity."):
            capacity_lines.append(f"{k[len('capacity.'):]}={v}")
        else:
            raise ValueError(f"unknown config key {k!r}")
    if updater:
        cfg.updater = dataclasses.replace(cfg.updater, **updater)
    if capacity_lines:
        cfg.capacity = load_params("\n".join(capacity_lines))
    cfg.__post_init__()
    return cfg


@dataclass
class IngestResult:
    accepted: int = 0
    offroute: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)


class System:
    """The wired set of components behind the service."""

    def __init__(self, config: ServiceConfig | None = None, store: RouteStore | None = None, clock=time.time):
        self.config = config or ServiceConfig()
        self.clock = clock
        self.store = store if store is not None else self._open_store()
        self.store.instrumented = self.config.instrumentation
        self.tracker = FleetTracker(self.store, self.config.updater)
        self.engine = EtaEngine(self.store, tick=self.config.eta_tick, clock=clock)
        self.query = QueryService(self.store, self.engine)
        self.started_at = clock()
        self.rejected_updates = 0
        self.offroute_updates = 0
        self._lock = threading.Lock()

    def _open_store(self) -> RouteStore:
        cfg = self.config
        if cfg.snapshot and Path(cfg.snapshot).exists():
            store = RouteStore.load(cfg.snapshot, node_threshold=cfg.node_threshold)
        else:
            store = RouteStore(node_threshold=cfg.node_threshold)
        if cfg.journal:
            if Path(cfg.journal).exists():
                n = store.replay(cfg.journal)
                log.info("replayed %d journal records from %s", n, cfg.journal)
            store.attach_journal(cfg.journal)
        return store

    def ingest_lines(self, text: str) -> IngestResult:
        res = IngestResult()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                self.tracker.ingest(parse_update(line))
                res.accepted += 1
            except OffRoute:
                res.offroute += 1
            except (ValueError, NotFound, StaleTimestamp) as exc:
                res.rejected.append((lineno, str(exc)))
        with self._lock:
            self.rejected_updates += len(res.rejected)
            self.offroute_updates += res.offroute
        return res

    def create_route(self, route_id: str, trace_text: str, threshold: float | None = None):
        cfg = PwlConfig(threshold) if threshold is not None else self.config.pwl
        return create_route_from_trace(route_id, parse_trace(trace_text.splitlines()), cfg, self.store)

    def close(self) -> None:
        self.store.close()


class EtaTicker:
    """Background thread recomputing the ETA table every tick."""

    def __init__(self, engine: EtaEngine, interval: float):
        self.engine = engine
        self.interval = interval
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="eta-ticker", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                self.engine.recompute_all()
            except Exception:
                log.exception("ETA tick failed")
            self._stop.wait(self.interval)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


_STATUS = [
    (AmbiguousStop, 409),
    (NoService, 503),
    (NoCommonRoute, 404),
    (NotFound, 404),
    (NoData, 404),
    (InvalidRoute, 422),
    (ValueError, 400),
]


def _status_for(exc: Exception) -> int:
    for cls, code in _STATUS:
        if isinstance(exc, cls):
            return code
    return 500


def create_app(system: System, run_ticker: bool = True) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app):
        ticker = EtaTicker(system.engine, system.config.eta_tick) if run_ticker else None
        if ticker:
            ticker.start()
        try:
            yield
        finally:
            if ticker:
                ticker.stop()
            system.close()

    app = FastAPI(title="buseta", lifespan=lifespan)
    app.state.system = system

    @app.exception_handler(BusEtaError)
    async def _domain_error(request: Request, exc: BusEtaError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=_status_for(exc))

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=400)

    def require_admin(secret: str | None):
        expected = system.config.admin_secret or os.environ.get(ADMIN_SECRET_ENV)
        if not expected:
            raise HTTPException(403, "admin endpoints are disabled (no secret configured)")
        if secret is None or not secrets.compare_digest(secret, expected):
            raise HTTPException(401, "bad admin secret")

    @app.post("/updates", response_class=PlainTextResponse)
    async def post_updates(request: Request):
        body = (await request.body()).decode("utf-8", errors="replace")
        res = system.ingest_lines(body)
        text = f"accepted {res.accepted} offroute {res.offroute} rejected {len(res.rejected)}\n"
        text += "".join(f"line {n}: {msg}\n" for n, msg in res.rejected)
        return PlainTextResponse(text, status_code=400 if res.rejected else 200)

    @app.get("/eta")
    def get_eta(stop: str | None = None, stop_id: int | None = None, route: str | None = None):
        if (stop is None) == (stop_id is None):
            raise HTTPException(400, "give exactly one of stop or stop_id")
        if stop_id is not None:
            rows = system.query.arrivals(stop_id, route, category="station")
        else:
            rows = system.query.arrivals(stop, route)
        return {"rows": [dataclasses.asdict(r) for r in rows]}

    @app.post("/sms", response_class=PlainTextResponse)
    async def post_sms(request: Request):
        body = (await request.body()).decode("utf-8", errors="replace")
        return system.query.sms_handle(body)

    @app.post("/trip")
    def post_trip(payload: dict = Body(...)):
        try:
            source = payload["source"]
            destination = payload["destination"]
            desired = float(payload.get("desired", 0))
        except (KeyError, TypeError, ValueError):
            raise HTTPException(400, "expected {source, destination, desired}")
        return dataclasses.asdict(system.query.plan_trip(source, destination, desired))

    @app.get("/routes/{route_id}/geometry")
    def get_geometry(route_id: str):
        return system.query.route_geometry(route_id)

    @app.get("/routes/{route_id}/buses")
    def get_buses(route_id: str):
        return {"buses": [dataclasses.asdict(r) for r in system.query.tracking_snapshot(route_id)]}

    def _analysis_json(a):
        return {
            "trips": a.trips,
            "total_distance": a.total_distance,
            "buses_used": sorted(a.buses_used),
            "quarantined": a.quarantined,
        }

    @app.get("/analysis/bus/{bus_id}")
    def get_bus_analysis(bus_id: str, start: float | None = None, end: float | None = None):
        return _analysis_json(system.tracker.analysis(bus_id=bus_id, start=start, end=end))

    @app.get("/analysis/route/{route_id}")
    def get_route_analysis(route_id: str, start: float | None = None, end: float | None = None):
        return _analysis_json(system.tracker.analysis(route_id=route_id, start=start, end=end))

    @app.post("/admin/routes")
    async def post_route(request: Request, route: str = Query(...), threshold: float | None = None,
                         x_admin_secret: str | None = Header(None)):
        require_admin(x_admin_secret)
        body = (await request.body()).decode("utf-8", errors="replace")
        r = system.create_route(route, body, threshold)
        return {"route_id": r.route_id, "links": list(r.links), "terminus_position": r.terminus}

    @app.delete("/admin/routes/{route_id}")
    def delete_route(route_id: str, x_admin_secret: str | None = Header(None)):
        require_admin(x_admin_secret)
        system.store.delete_route(route_id)
        return {"deleted": route_id}

    @app.post("/admin/buses")
    def post_bus(payload: dict = Body(...), x_admin_secret: str | None = Header(None)):
        require_admin(x_admin_secret)
        try:
            ident = system.tracker.register_bus(str(payload["bus_id"]), str(payload["route_id"]),
                                                str(payload.get("bus_type", "ordinary")))
        except KeyError:
            raise HTTPException(400, "expected {bus_id, route_id[, bus_type]}")
        return dataclasses.asdict(ident)

    @app.get("/admin/counters")
    def get_counters(x_admin_secret: str | None = Header(None)):
        require_admin(x_admin_secret)
        return {
            "counters": system.store.counter.snapshot(),
            "rejected_updates": system.rejected_updates,
            "offroute_updates": system.offroute_updates,
            "uptime_s": system.clock() - system.started_at,
        }

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    # uvicorn exits the process on bind errors, so probe the address first
    try:
        with socket.create_server((config.host, config.port)):
            pass
    except OSError as exc:
        raise BindFailure(f"cannot listen on {config.host}:{config.port}: {exc}") from exc
    system = System(config)
    uvicorn.run(create_app(system), host=config.host, port=config.port, log_level="info")
