"""Real-time bus passenger information core.

Route models are built from GPS traces, live position updates drive per-link
travel-time estimates, and those feed arrival-time predictions at every stop.
"""

from .geo import GeoPoint, dist, linearity_error
from .store import Link, Node, NodeKind, Route, RouteStore, StopBinding
from .route_creator import PwlConfig, TracePoint, create_route_from_trace, simplify
from .tracking import BusState, FleetTracker, PositionUpdate, UpdaterConfig
from .eta import EtaEngine, EtaEntry, EtaTable
from .query import QueryService
from .capacity import LoadParams, max_fleet, total_load
from .simulator import FleetSimulator, SimConfig

__version__ = "0.1.0"

__all__ = [
    "BusState",
    "EtaEngine",
    "EtaEntry",
    "EtaTable",
    "FleetSimulator",
    "FleetTracker",
    "GeoPoint",
    "Link",
    "LoadParams",
    "Node",
    "NodeKind",
    "PositionUpdate",
    "PwlConfig",
    "QueryService",
    "Route",
    "RouteStore",
    "SimConfig",
    "StopBinding",
    "TracePoint",
    "UpdaterConfig",
    "create_route_from_trace",
    "dist",
    "linearity_error",
    "max_fleet",
    "simplify",
    "total_load",
]
