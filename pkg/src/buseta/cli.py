"""Command line entry point: ``buseta <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .capacity import LoadParams, format_report, read_params
from .errors import BusEtaError
from .route_creator import PwlConfig, create_route_from_trace, read_trace
from .store import RouteStore

DEFAULT_SNAPSHOT = "buseta.snapshot"


def _cmd_serve(args) -> int:
    from .service import parse_config, serve

    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = {
        "listen": args.listen,
        "snapshot": args.snapshot,
        "journal": args.journal,
        "eta_tick": args.tick,
    }
    if args.no_instrumentation:
        overrides["instrumentation"] = "off"
    serve(parse_config(text, overrides))
    return 0


def _cmd_create_route(args) -> int:
    snapshot = Path(args.snapshot)
    store = RouteStore.load(snapshot) if snapshot.exists() else RouteStore()
    route = create_route_from_trace(args.route, read_trace(args.trace), PwlConfig(args.threshold), store)
    store.write_snapshot(snapshot)
    print(f"route {route.route_id}: {len(route.links)} links, terminus at position {route.terminus}")
    for c in store.conflicts:
        print(f"warning: {c}", file=sys.stderr)
    return 0


def _cmd_capacity(args) -> int:
    params = read_params(args.params) if args.params else LoadParams()
    sys.stdout.write(format_report(params))
    return 0


def _cmd_simulate(args) -> int:
    from .eta import EtaEngine
    from .simulator import FleetSimulator, SimConfig, run_closed_loop
    from .tracking import FleetTracker

    store = RouteStore.load(args.routes)
    cfg = SimConfig(seed=args.seed, update_rate=args.rate, speed=args.speed, gps_noise_sigma=args.noise)
    sim = FleetSimulator(store, cfg)
    for rid in store.route_ids():
        sim.place_evenly(rid, args.buses)
    duration = args.duration * 60.0
    warmup = args.warmup * 60.0 if args.warmup is not None else duration / 3
    report = run_closed_loop(sim, duration, FleetTracker(store), EtaEngine(store), warmup=warmup)
    text = report.format()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_query(args) -> int:
    import httpx

    base = args.url.rstrip("/")
    with httpx.Client(base_url=base, timeout=10.0) as client:
        if args.kind == "arrivals":
            params = {"stop": args.stop}
            if args.route:
                params["route"] = args.route
            resp = client.get("/eta", params=params)
        elif args.kind == "trip":
            resp = client.post("/trip", json={"source": args.source, "destination": args.destination, "desired": args.at})
        else:
            resp = client.post("/sms", content=" ".join(args.text).encode())
    if resp.headers.get("content-type", "").startswith("application/json"):
        print(json.dumps(resp.json(), indent=2))
    else:
        sys.stdout.write(resp.text if resp.text.endswith("\n") else resp.text + "\n")
    return 0 if resp.is_success else 1


def _cmd_export(args) -> int:
    store = RouteStore.from_journal(args.journal)
    store.write_snapshot(args.out)
    return 0


def _cmd_import(args) -> int:
    if Path(args.journal).exists() and not args.append:
        print(f"{args.journal} exists; pass --append to add to it", file=sys.stderr)
        return 2
    store = RouteStore(journal=args.journal)
    store.import_snapshot(Path(args.snapshot).read_text(encoding="utf-8"))
    store.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="buseta", description="Real-time bus arrival information service")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--config", help="key=value configuration file")
    s.add_argument("--listen", help="host:port")
    s.add_argument("--snapshot")
    s.add_argument("--journal")
    s.add_argument("--tick", type=float, help="ETA recomputation interval in seconds")
    s.add_argument("--no-instrumentation", action="store_true")
    s.set_defaults(func=_cmd_serve)

    s = sub.add_parser("create-route", help="build a route from a GPS trace file")
    s.add_argument("--route", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--threshold", type=float, default=25.0, help="PWL error threshold in meters")
    s.add_argument("--snapshot", default=DEFAULT_SNAPSHOT)
    s.set_defaults(func=_cmd_create_route)

    s = sub.add_parser("capacity", help="server load and fleet size estimate")
    s.add_argument("--params", help="key=value parameter file")
    s.set_defaults(func=_cmd_capacity)

    s = sub.add_parser("simulate", help="closed-loop ETA accuracy run")
    s.add_argument("--routes", required=True, help="snapshot file")
    s.add_argument("--buses", type=int, default=3, help="buses per route")
    s.add_argument("--duration", type=float, required=True, help="minutes of simulated time")
    s.add_argument("--warmup", type=float, help="minutes excluded from scoring (default: a third)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="GPS noise sigma in meters")
    s.add_argument("--speed", type=float, default=10.0, help="m/s")
    s.add_argument("--rate", type=float, default=2.0, help="updates per minute per bus")
    s.add_argument("--report")
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("query", help="one-shot query against a running service")
    s.add_argument("--url", default="http://127.0.0.1:8080")
    qs = s.add_subparsers(dest="kind", required=True)
    q = qs.add_parser("arrivals")
    q.add_argument("stop")
    q.add_argument("--route")
    q = qs.add_parser("trip")
    q.add_argument("source")
    q.add_argument("destination")
    q.add_argument("--at", type=float, default=0.0, help="desired departure, seconds from now")
    q = qs.add_parser("sms")
    q.add_argument("text", nargs="+")
    s.set_defaults(func=_cmd_query)

    s = sub.add_parser("export", help="replay a journal into a snapshot file")
    s.add_argument("--journal", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_export)

    s = sub.add_parser("import", help="seed a journal from a snapshot file")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--journal", required=True)
    s.add_argument("--append", action="store_true")
    s.set_defaults(func=_cmd_import)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (BusEtaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
