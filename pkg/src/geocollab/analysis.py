"""Built-in GIS tools: great-circle distance and buffer construction.

All computations use a spherical earth with the IUGG mean radius. Results
feed the op_exec/op_result operation-sharing pipeline, so every function
here is pure and safe to call concurrently.

Polyline buffering works in a local azimuthal-equidistant plane centered
on the input's centroid: project, buffer with round caps, unproject. That
is accurate at the supported scale (segments capped at 100 km) and keeps
join rounding to a well-tested planar library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from shapely.geometry import LineString, Point

from .protocol import GeoAnchor

EARTH_RADIUS_M = 6_371_008.8
MAX_BUFFER_RADIUS_M = 1_000_000.0
MAX_SEGMENT_M = 100_000.0
CAP_ARC_VERTICES = 16  # vertices per semicircular end cap


class AnalysisError(Exception):
    """Base for analysis failures."""


class InvalidRadius(AnalysisError):
    """Radius outside (0, 1,000,000] meters."""


class PoleProximity(AnalysisError):
    """Buffer center lies within one radius of a pole."""


class SegmentTooLong(AnalysisError):
    """A polyline segment exceeds the 100 km local-plane validity bound."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        for name, value in (("lat", self.lat), ("lon", self.lon)):
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise ValueError(f"{name} must be a finite number")
            object.__setattr__(self, name, float(value))
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError("lat must be within [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError("lon must be within [-180, 180)")


def geodesic_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters, haversine formulation.

    Exactly symmetric in its arguments and always >= 0.
    """
    lat1, lon1 = math.radians(a.lat), math.radians(a.lon)
    lat2, lon2 = math.radians(b.lat), math.radians(b.lon)
    sin_dlat = math.sin((lat2 - lat1) / 2.0)
    sin_dlon = math.sin((lon2 - lon1) / 2.0)
    h = sin_dlat * sin_dlat + math.cos(lat1) * math.cos(lat2) * sin_dlon * sin_dlon
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def destination_point(origin: GeoPoint, bearing_deg: float, distance_m: float) -> GeoPoint:
    """Point reached by travelling distance_m along an initial bearing."""
    delta = distance_m / EARTH_RADIUS_M
    theta = math.radians(bearing_deg)
    lat1 = math.radians(origin.lat)
    lon1 = math.radians(origin.lon)
    sin_lat2 = math.sin(lat1) * math.cos(delta) + math.cos(lat1) * math.sin(delta) * math.cos(theta)
    sin_lat2 = max(-1.0, min(1.0, sin_lat2))
    lat2 = math.asin(sin_lat2)
    lon2 = lon1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(lat1),
        math.cos(delta) - math.sin(lat1) * sin_lat2,
    )
    lon2_deg = math.degrees(lon2)
    lon2_deg = ((lon2_deg + 180.0) % 360.0) - 180.0
    return GeoPoint(lat=math.degrees(lat2), lon=lon2_deg)


def _check_radius(radius_m: float) -> float:
    if not isinstance(radius_m, (int, float)) or isinstance(radius_m, bool) or not math.isfinite(radius_m):
        raise InvalidRadius(f"radius must be a finite number, got {radius_m!r}")
    if not 0.0 < radius_m <= MAX_BUFFER_RADIUS_M:
        raise InvalidRadius(f"radius must be within (0, {MAX_BUFFER_RADIUS_M:g}] m, got {radius_m:g}")
    return float(radius_m)


def _pole_distance_m(p: GeoPoint) -> float:
    return math.radians(90.0 - abs(p.lat)) * EARTH_RADIUS_M


def buffer_point(center: GeoPoint, radius_m: float, n: int = 64) -> list[GeoAnchor]:
    """Ring of n vertices at radius_m around center, bearing order from true north.

    Each vertex sits on the geodesic circle within 0.1% of the radius.
    Centers within one radius of a pole are rejected because the bearing
    sweep degenerates there.
    """
    radius_m = _check_radius(radius_m)
    if not isinstance(n, int) or isinstance(n, bool) or n < 3:
        raise AnalysisError(f"vertex count must be an integer >= 3, got {n!r}")
    if _pole_distance_m(center) <= radius_m:
        raise PoleProximity(f"center at lat {center.lat:g} is within {radius_m:g} m of a pole")
    ring = []
    for k in range(n):
        p = destination_point(center, 360.0 * k / n, radius_m)
        ring.append(GeoAnchor(lat=p.lat, lon=p.lon))
    return ring


def _aeq_forward(origin: GeoPoint, p: GeoPoint) -> tuple[float, float]:
    """Azimuthal-equidistant projection: meters east/north of origin."""
    d = geodesic_distance(origin, p)
    if d == 0.0:
        return (0.0, 0.0)
    lat1, lon1 = math.radians(origin.lat), math.radians(origin.lon)
    lat2, lon2 = math.radians(p.lat), math.radians(p.lon)
    y = math.sin(lon2 - lon1) * math.cos(lat2)
    x = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(lon2 - lon1)
    bearing = math.atan2(y, x)
    return (d * math.sin(bearing), d * math.cos(bearing))


def _aeq_inverse(origin: GeoPoint, x: float, y: float) -> GeoPoint:
    d = math.hypot(x, y)
    if d == 0.0:
        return origin
    bearing = math.degrees(math.atan2(x, y))
    return destination_point(origin, bearing, d)


def buffer_polyline(line: Sequence[GeoPoint], radius_m: float) -> list[GeoAnchor]:
    """Buffer polygon around a polyline: parallel offsets plus round caps.

    Segments longer than 100 km are rejected (the local plane stops being a
    faithful model there). A degenerate line whose points coincide buffers
    like a single point.
    """
    radius_m = _check_radius(radius_m)
    if len(line) < 2:
        raise AnalysisError(f"a polyline needs at least 2 points, got {len(line)}")
    for a, b in zip(line, line[1:]):
        seg = geodesic_distance(a, b)
        if seg > MAX_SEGMENT_M:
            raise SegmentTooLong(f"segment of {seg:.0f} m exceeds the {MAX_SEGMENT_M:.0f} m limit")

    if all(p == line[0] for p in line[1:]):
        return buffer_point(line[0], radius_m)

    origin = GeoPoint(
        lat=sum(p.lat for p in line) / len(line),
        lon=sum(p.lon for p in line) / len(line),
    )
    planar = LineString([_aeq_forward(origin, p) for p in line])
    # quad_segs is vertices per quarter arc; a semicircular cap spans two quarters
    polygon = planar.buffer(radius_m, quad_segs=CAP_ARC_VERTICES // 2)
    ring = list(polygon.exterior.coords)
    if len(ring) >= 2 and ring[0] == ring[-1]:
        ring = ring[:-1]
    out = []
    for x, y in ring:
        p = _aeq_inverse(origin, x, y)
        out.append(GeoAnchor(lat=p.lat, lon=p.lon))
    return out


# --- op_exec integration ------------------------------------------------------

BUILTIN_OPS = ("distance", "buffer_point", "buffer_polyline")


def _point_from_params(raw: object, name: str) -> GeoPoint:
    if not isinstance(raw, dict) or "lat" not in raw or "lon" not in raw:
        raise AnalysisError(f"{name} must be an object with lat and lon")
    try:
        return GeoPoint(lat=raw["lat"], lon=raw["lon"])
    except ValueError as exc:
        raise AnalysisError(f"{name}: {exc}") from exc


def run_builtin(op: str, params: dict) -> dict:
    """Execute a built-in analysis from a JSON params payload.

    Raises AnalysisError (or a subclass) on bad input; the caller decides
    how the failure surfaces on the wire.
    """
    if not isinstance(params, dict):
        raise AnalysisError("params must be an object")
    if op == "distance":
        a = _point_from_params(params.get("a"), "a")
        b = _point_from_params(params.get("b"), "b")
        return {"meters": geodesic_distance(a, b)}
    if op == "buffer_point":
        center = _point_from_params(params.get("center"), "center")
        n = params.get("n", 64)
        ring = buffer_point(center, params.get("radius_m"), n=n)
        return {"polygon": [v.to_dict() for v in ring]}
    if op == "buffer_polyline":
        raw_line = params.get("line")
        if not isinstance(raw_line, list):
            raise AnalysisError("line must be a list of points")
        line = [_point_from_params(p, f"line[{i}]") for i, p in enumerate(raw_line)]
        ring = buffer_polyline(line, params.get("radius_m"))
        return {"polygon": [v.to_dict() for v in ring]}
    raise AnalysisError(f"unknown built-in op {op!r}")
