"""Analytic server-load model and fleet sizing.

The server handles ``r_server`` store queries per minute. Load is the sum of
four terms, each a scaled query complexity:

    link updater      alpha * r_b * B
    ETA calculator    beta  * r_eta * L
    SMS and website   gamma * (r_sms + r_w)
    station units     delta * r_s * S
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import Infeasible, NoData


@dataclass(frozen=True)
class LoadParams:
    r_server: float = 30000.0
    r_b: float = 2.0
    r_eta: float = 1.0
    r_sms: float = 20.0
    r_w: float = 50.0
    r_s: float = 1.0
    alpha: float = 10.0
    beta: float = 1.0
    gamma: float = 6.0
    delta: float = 1.0
    links_per_route: float = 100.0
    buses_per_route: float = 10.0
    stops: float = 2000.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v}")
        if self.r_server <= 0:
            raise ValueError("r_server must be positive")


def load_params(text: str, base: LoadParams | None = None) -> LoadParams:
    """Read ``key=value`` lines (``#`` comments allowed) over ``base``."""
    known = {f.name for f in fields(LoadParams)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown parameter {key!r}")
        values[key] = float(value)
    return replace(base or LoadParams(), **values)


def read_params(path: str | Path) -> LoadParams:
    return load_params(Path(path).read_text(encoding="utf-8"))


def load_terms(p: LoadParams, buses: float, links: float, stops: float) -> dict[str, float]:
    return {
        "link_updater": p.alpha * p.r_b * buses,
        "eta_calculator": p.beta * p.r_eta * links,
        "sms_web": p.gamma * (p.r_sms + p.r_w),
        "station": p.delta * p.r_s * stops,
    }


def total_load(p: LoadParams, buses: float, links: float, stops: float) -> float:
    """Queries per minute generated by the whole system."""
    t = load_terms(p, buses, links, stops)
    return t["link_updater"] + t["eta_calculator"] + t["sms_web"] + t["station"]


def max_fleet(p: LoadParams) -> tuple[int, int]:
    """Largest route count R (and buses R * buses_per_route) with load strictly under capacity."""
    if p.buses_per_route <= 0 or p.links_per_route <= 0:
        raise ValueError("buses_per_route and links_per_route must be positive")

    def load(r):
        return total_load(p, r * p.buses_per_route, r * p.links_per_route, p.stops)

    fixed = load(0)
    if fixed >= p.r_server:
        raise Infeasible(f"fixed load {fixed:g} already reaches capacity {p.r_server:g}")
    per_route = load(1) - fixed
    if per_route <= 0:
        raise Infeasible("per-route load is zero; fleet size is unbounded")
    r = max(0, math.floor((p.r_server - fixed) / per_route))
    # guard the floor against rounding on either side
    while r > 0 and load(r) >= p.r_server:
        r -= 1
    while load(r + 1) < p.r_server:
        r += 1
    return r, int(round(r * p.buses_per_route))


@dataclass(frozen=True)
class CategoryReport:
    category: str
    measured_per_min: float
    predicted_per_min: float
    ratio: float
    flagged: bool


def reconcile(measured: dict[str, int], window_minutes: float, p: LoadParams,
              buses: float, links: float, stops: float, tolerance: float = 2.0) -> list[CategoryReport]:
    """Compare measured query rates per category against the model's terms.

    A category is flagged when measured and predicted rates differ by more
    than ``tolerance`` times in either direction.
    """
    if window_minutes <= 0 or not any(measured.values()):
        raise NoData("no store accesses recorded in the window")
    predicted = load_terms(p, buses, links, stops)
    out = []
    for cat, pred in predicted.items():
        rate = measured.get(cat, 0) / window_minutes
        if pred == 0:
            ratio = math.inf if rate else 1.0
        else:
            ratio = rate / pred
        flagged = not (1.0 / tolerance <= ratio <= tolerance)
        out.append(CategoryReport(cat, rate, pred, ratio, flagged))
    return out


def format_report(p: LoadParams) -> str:
    r, b = max_fleet(p)
    links = r * p.links_per_route
    terms = load_terms(p, b, links, p.stops)
    lines = [f"routes\t{r}", f"buses\t{b}"]
    lines += [f"{k}\t{v:g}" for k, v in terms.items()]
    lines.append(f"total\t{total_load(p, b, links, p.stops):g}")
    lines.append(f"capacity\t{p.r_server:g}")
    return "\n".join(lines) + "\n"
