"""Great-circle distance and the triangle "linearity error" on WGS-84 degrees."""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")

    def __str__(self):
        return f"({self.lat:.6f}, {self.lon:.6f})"


def dist(p: GeoPoint, q: GeoPoint) -> float:
    """Haversine distance in meters."""
    phi1 = math.radians(p.lat)
    phi2 = math.radians(q.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(q.lon - p.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    h = min(1.0, max(0.0, h))
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


def linearity_error(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> float:
    """Detour in meters when going a -> b -> c instead of a -> c.

    Zero when ``b`` lies on the shortest path between ``a`` and ``c``. Small
    negative results from rounding are clamped to zero.
    """
    return max(0.0, dist(a, b) + dist(b, c) - dist(a, c))


def destination(p: GeoPoint, bearing_deg: float, meters: float) -> GeoPoint:
    """Point reached from ``p`` after ``meters`` along the initial bearing."""
    delta = meters / EARTH_RADIUS_M
    theta = math.radians(bearing_deg)
    phi1 = math.radians(p.lat)
    lmb1 = math.radians(p.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lmb2 = lmb1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    lon = (math.degrees(lmb2) + 540.0) % 360.0 - 180.0
    return GeoPoint(math.degrees(phi2), lon)


def interpolate(p: GeoPoint, q: GeoPoint, frac: float) -> GeoPoint:
    """Linear interpolation in degree space; adequate for links of a few km."""
    return GeoPoint(p.lat + (q.lat - p.lat) * frac, p.lon + (q.lon - p.lon) * frac)
