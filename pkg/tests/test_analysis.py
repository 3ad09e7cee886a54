"""Analysis tests: haversine against a high-precision oracle, buffer geometry."""

import math
import random

import pytest

from geocollab.analysis import (
    EARTH_RADIUS_M,
    AnalysisError,
    GeoPoint,
    InvalidRadius,
    PoleProximity,
    SegmentTooLong,
    buffer_point,
    buffer_polyline,
    destination_point,
    geodesic_distance,
    run_builtin,
)

ONE_DEGREE_ARC_M = EARTH_RADIUS_M * math.pi / 180.0  # closed-form R*theta oracle


def mp_great_circle(a: GeoPoint, b: GeoPoint) -> float:
    """Independent oracle: Vincenty central-angle formula at 50 digits."""
    import mpmath as mp

    with mp.workdps(50):
        lat1, lon1 = mp.radians(a.lat), mp.radians(a.lon)
        lat2, lon2 = mp.radians(b.lat), mp.radians(b.lon)
        dlon = lon2 - lon1
        y = mp.sqrt(
            (mp.cos(lat2) * mp.sin(dlon)) ** 2
            + (mp.cos(lat1) * mp.sin(lat2) - mp.sin(lat1) * mp.cos(lat2) * mp.cos(dlon)) ** 2
        )
        x = mp.sin(lat1) * mp.sin(lat2) + mp.cos(lat1) * mp.cos(lat2) * mp.cos(dlon)
        return float(mp.atan2(y, x) * mp.mpf(EARTH_RADIUS_M))


def test_distance_identity():
    p = GeoPoint(31.23, 121.47)
    assert geodesic_distance(p, p) == 0.0


def test_distance_one_degree_equator():
    d = geodesic_distance(GeoPoint(0, 0), GeoPoint(0, 1))
    assert d == pytest.approx(ONE_DEGREE_ARC_M, rel=1e-9)
    assert d == pytest.approx(111_195.0, abs=1.0)


def test_distance_antipodal_maximum():
    # (0, 180) is the same point as (0, -180) in the half-open lon range
    d = geodesic_distance(GeoPoint(0, 0), GeoPoint(0, -180))
    assert d == pytest.approx(EARTH_RADIUS_M * math.pi, rel=1e-12)


def test_distance_symmetry_exact():
    rng = random.Random(42)
    for _ in range(200):
        a = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 179.999))
        b = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 179.999))
        assert geodesic_distance(a, b) == geodesic_distance(b, a)


def test_distance_against_high_precision_oracle():
    rng = random.Random(20260810)
    pairs = []
    for _ in range(900):
        pairs.append(
            (
                GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 179.999)),
                GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 179.999)),
            )
        )
    for _ in range(100):  # near-antipodal stress
        a = GeoPoint(rng.uniform(-89, 89), rng.uniform(-179, 179))
        anti_lon = a.lon + 180.0 + rng.uniform(-0.01, 0.01)
        anti_lon = ((anti_lon + 180.0) % 360.0) - 180.0
        pairs.append((a, GeoPoint(-a.lat + rng.uniform(-0.01, 0.01), anti_lon)))
    worst = 0.0
    for a, b in pairs:
        expected = mp_great_circle(a, b)
        got = geodesic_distance(a, b)
        if expected > 0:
            worst = max(worst, abs(got - expected) / expected)
    assert worst <= 0.005, f"worst relative error {worst}"


def test_triangle_inequality():
    rng = random.Random(7)
    for _ in range(300):
        pts = [GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 179.999)) for _ in range(3)]
        ab = geodesic_distance(pts[0], pts[1])
        bc = geodesic_distance(pts[1], pts[2])
        ac = geodesic_distance(pts[0], pts[2])
        assert ac <= (ab + bc) * (1 + 1e-6)


def test_destination_point_round_trip():
    rng = random.Random(5)
    for _ in range(100):
        origin = GeoPoint(rng.uniform(-80, 80), rng.uniform(-179, 179))
        distance = rng.uniform(1.0, 500_000.0)
        target = destination_point(origin, rng.uniform(0, 360), distance)
        assert geodesic_distance(origin, target) == pytest.approx(distance, rel=1e-9)


# --- buffer_point --------------------------------------------------------------


def test_buffer_point_example_four_vertices():
    center = GeoPoint(0, 0)
    ring = buffer_point(center, 1000.0, n=4)
    assert len(ring) == 4
    # bearings 0, 90, 180, 270: north, east, south, west of the center
    north, east, south, west = ring
    assert north.lat > 0 and abs(north.lon) < 1e-9
    assert east.lon > 0 and abs(east.lat) < 1e-9
    assert south.lat < 0 and abs(south.lon) < 1e-9
    assert west.lon < 0 and abs(west.lat) < 1e-9
    for vertex in ring:
        d = geodesic_distance(center, GeoPoint(vertex.lat, vertex.lon))
        assert abs(d - 1000.0) / 1000.0 <= 0.001


def test_buffer_point_default_accuracy():
    rng = random.Random(11)
    for _ in range(20):
        center = GeoPoint(rng.uniform(-60, 60), rng.uniform(-179, 179))
        radius = rng.uniform(10.0, 500_000.0)
        ring = buffer_point(center, radius)
        assert len(ring) == 64
        for vertex in ring:
            d = geodesic_distance(center, GeoPoint(vertex.lat, vertex.lon))
            assert abs(d - radius) / radius <= 0.001


def test_buffer_point_zero_radius():
    with pytest.raises(InvalidRadius):
        buffer_point(GeoPoint(0, 0), 0.0)
    with pytest.raises(InvalidRadius):
        buffer_point(GeoPoint(0, 0), -5.0)
    with pytest.raises(InvalidRadius):
        buffer_point(GeoPoint(0, 0), 2_000_000.0)


def test_buffer_point_pole_proximity():
    with pytest.raises(PoleProximity):
        buffer_point(GeoPoint(89.9999, 0), 100_000.0)
    with pytest.raises(PoleProximity):
        buffer_point(GeoPoint(-89.9999, 10), 100_000.0)


# --- buffer_polyline ------------------------------------------------------------


def planar_area(ring, origin: GeoPoint) -> float:
    """Shoelace area of a lat/lon ring, projected by an independent equirectangular map."""
    cos0 = math.cos(math.radians(origin.lat))
    pts = [
        (
            math.radians(v.lon - origin.lon) * cos0 * EARTH_RADIUS_M,
            math.radians(v.lat - origin.lat) * EARTH_RADIUS_M,
        )
        for v in ring
    ]
    total = 0.0
    for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
        total += x1 * y2 - x2 * y1
    return abs(total) / 2.0


def point_in_ring(lat: float, lon: float, ring) -> bool:
    """Ray casting in lat/lon space, independent of shapely."""
    inside = False
    coords = [(v.lon, v.lat) for v in ring]
    for (x1, y1), (x2, y2) in zip(coords, coords[1:] + coords[:1]):
        if (y1 > lat) != (y2 > lat):
            x_at = (x2 - x1) * (lat - y1) / (y2 - y1) + x1
            if lon < x_at:
                inside = not inside
    return inside


def test_polyline_buffer_area_matches_closed_form():
    start = GeoPoint(31.0, 121.0)
    length = 5_000.0
    radius = 400.0
    end = destination_point(start, 90.0, length)
    ring = buffer_polyline([start, end], radius)
    expected = 2.0 * radius * length + math.pi * radius * radius
    mid = GeoPoint((start.lat + end.lat) / 2, (start.lon + end.lon) / 2)
    got = planar_area(ring, mid)
    assert abs(got - expected) / expected <= 0.05


def test_polyline_buffer_contains_vertices_and_envelope():
    line = [GeoPoint(10.0, 20.0), GeoPoint(10.05, 20.05), GeoPoint(10.02, 20.12)]
    radius = 800.0
    ring = buffer_polyline(line, radius)
    for p in line:
        assert point_in_ring(p.lat, p.lon, ring)
    for vertex in ring:
        nearest = min(
            min(geodesic_distance(GeoPoint(vertex.lat, vertex.lon), p) for p in line),
            *(
                _point_segment_distance(vertex, a, b)
                for a, b in zip(line, line[1:])
            ),
        )
        assert 0.9 * radius <= nearest <= 1.5 * radius


def _point_segment_distance(vertex, a: GeoPoint, b: GeoPoint) -> float:
    """Planar point-to-segment distance in a local tangent frame around a."""
    cos0 = math.cos(math.radians(a.lat))

    def to_xy(lat, lon):
        return (
            math.radians(lon - a.lon) * cos0 * EARTH_RADIUS_M,
            math.radians(lat - a.lat) * EARTH_RADIUS_M,
        )

    px, py = to_xy(vertex.lat, vertex.lon)
    x2, y2 = to_xy(b.lat, b.lon)
    seg_len2 = x2 * x2 + y2 * y2
    if seg_len2 == 0:
        return math.hypot(px, py)
    t = max(0.0, min(1.0, (px * x2 + py * y2) / seg_len2))
    return math.hypot(px - t * x2, py - t * y2)


def test_polyline_degenerate_behaves_as_point():
    p = GeoPoint(5.0, 5.0)
    ring = buffer_polyline([p, p], 1000.0)
    assert len(ring) == 64
    for vertex in ring:
        d = geodesic_distance(p, GeoPoint(vertex.lat, vertex.lon))
        assert abs(d - 1000.0) / 1000.0 <= 0.001


def test_polyline_segment_too_long():
    with pytest.raises(SegmentTooLong):
        buffer_polyline([GeoPoint(0, 0), GeoPoint(0, 4.5)], 100.0)  # ~500 km


def test_polyline_radius_validation():
    with pytest.raises(InvalidRadius):
        buffer_polyline([GeoPoint(0, 0), GeoPoint(0, 0.01)], 0.0)
    with pytest.raises(AnalysisError):
        buffer_polyline([GeoPoint(0, 0)], 10.0)


# --- op payload adapter --------------------------------------------------------


def test_run_builtin_distance():
    result = run_builtin("distance", {"a": {"lat": 0, "lon": 0}, "b": {"lat": 0, "lon": 1}})
    assert result["meters"] == pytest.approx(ONE_DEGREE_ARC_M, rel=1e-9)


def test_run_builtin_buffer_point():
    result = run_builtin("buffer_point", {"center": {"lat": 0, "lon": 0}, "radius_m": 500.0, "n": 8})
    assert len(result["polygon"]) == 8


def test_run_builtin_buffer_polyline():
    params = {"line": [{"lat": 0, "lon": 0}, {"lat": 0, "lon": 0.02}], "radius_m": 100.0}
    result = run_builtin("buffer_polyline", params)
    assert len(result["polygon"]) >= 16


def test_run_builtin_bad_input():
    with pytest.raises(AnalysisError):
        run_builtin("distance", {"a": {"lat": 0}, "b": {"lat": 0, "lon": 1}})
    with pytest.raises(AnalysisError):
        run_builtin("viewshed", {})
    with pytest.raises(InvalidRadius):
        run_builtin("buffer_point", {"center": {"lat": 0, "lon": 0}, "radius_m": -1})
