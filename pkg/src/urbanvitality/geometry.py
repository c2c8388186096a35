"""Planar computational-geometry primitives.

Everything here works in a projected CRS with meter units. Polygons are
shapely geometries; points are ``Point`` named tuples. All values are
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import math
import random
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import Voronoi, cKDTree
from shapely.geometry import Point as ShapelyPoint, Polygon as ShapelyPolygon
from shapely.geometry.base import BaseGeometry

from .errors import EmptySetError, GeometryError


class Point(NamedTuple):
    x: float
    y: float


class Circle(NamedTuple):
    center: Point
    radius: float


def validate_polygon(poly: ShapelyPolygon) -> ShapelyPolygon:
    """Check a polygon for degenerate rings and self-intersections.

    Returns the polygon unchanged on success; raises GeometryError otherwise.
    Self-intersecting exteriors are rejected, never repaired.
    """
    if not isinstance(poly, ShapelyPolygon):
        raise GeometryError(f"expected a Polygon, got {type(poly).__name__}")
    coords = list(poly.exterior.coords)
    distinct = {(x, y) for x, y in coords}
    if len(distinct) < 3:
        raise GeometryError("degenerate ring: fewer than 3 distinct vertices")
    if not poly.is_valid:
        raise GeometryError("invalid polygon (self-intersecting or malformed ring)")
    if poly.area <= 0.0:
        raise GeometryError("polygon has zero area")
    for x, y in coords:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise GeometryError("non-finite coordinate in polygon")
    return poly


def polygon_area(poly: ShapelyPolygon) -> float:
    """Shoelace area of the exterior minus any holes, in m²."""
    validate_polygon(poly)
    return poly.area


def centroid(poly: ShapelyPolygon) -> Point:
    """Area-weighted centroid (holes subtracted)."""
    validate_polygon(poly)
    c = poly.centroid
    return Point(c.x, c.y)


def distance(a: Point | Sequence[float], b: Point | Sequence[float]) -> float:
    """Euclidean distance between two points in the projected plane."""
    return math.hypot(a[0] - b[0], a[1] - b[1])


# --- minimum enclosing circle (Welzl, randomized incremental) ---------------

_MEC_EPS = 1e-10


def _circle_from_two(p: Point, q: Point) -> tuple[float, float, float]:
    cx = (p[0] + q[0]) / 2.0
    cy = (p[1] + q[1]) / 2.0
    r = math.hypot(p[0] - q[0], p[1] - q[1]) / 2.0
    return cx, cy, r

def _circle_from_three(p, q, r) -> tuple[float, float, float] | None:
    ax, ay = p
    bx, by = q
    cx, cy = r
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        return None
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
          + (cx * cx + cy * cy) * (ay - by)) / d
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
          + (cx * cx + cy * cy) * (bx - ax)) / d
    return ux, uy, math.hypot(ax - ux, ay - uy)


def _in_circle(c: tuple[float, float, float], p) -> bool:
    return math.hypot(p[0] - c[0], p[1] - c[1]) <= c[2] * (1.0 + _MEC_EPS) + _MEC_EPS


def _mec_points(points: list[tuple[float, float]]) -> tuple[float, float, float]:
    pts = list(points)
    random.Random(0x5EED).shuffle(pts)
    c: tuple[float, float, float] | None = None
    for i, p in enumerate(pts):
        if c is not None and _in_circle(c, p):
            continue
        c = (p[0], p[1], 0.0)
        for j, q in enumerate(pts[:i]):
            if _in_circle(c, q):
                continue
            c = _circle_from_two(p, q)
            for r in pts[:j]:
                if _in_circle(c, r):
                    continue
                cc = _circle_from_three(p, q, r)
                if cc is not None:
                    c = cc
    assert c is not None
    return c


def min_enclosing_circle(poly: ShapelyPolygon) -> Circle:
    """Smallest circle containing every exterior vertex of the polygon."""
    validate_polygon(poly)
    pts = [(float(x), float(y)) for x, y in poly.exterior.coords[:-1]]
    cx, cy, r = _mec_points(pts)
    return Circle(Point(cx, cy), r)


def intersect_area(a: BaseGeometry, b: BaseGeometry) -> float:
    """Area of the intersection of two geometries; 0 when disjoint."""
    if isinstance(a, ShapelyPolygon):
        validate_polygon(a)
    if isinstance(b, ShapelyPolygon):
        validate_polygon(b)
    if not a.intersects(b):
        return 0.0
    return a.intersection(b).area


# --- Voronoi tessellation ---------------------------------------------------

def _clip_by_halfplane(pts: list[tuple[float, float]], a: float, b: float,
                       c: float) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a convex ring by the halfplane ax+by <= c."""
    out: list[tuple[float, float]] = []
    n = len(pts)
    for i in range(n):
        px, py = pts[i]
        qx, qy = pts[(i + 1) % n]
        pin = a * px + b * py <= c
        qin = a * qx + b * qy <= c
        if pin:
            out.append((px, py))
        if pin != qin:
            denom = a * (qx - px) + b * (qy - py)
            t = (c - (a * px + b * py)) / denom
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _neighbor_map(sites: np.ndarray) -> dict[int, set[int]]:
    """Voronoi-neighbor indices per site; falls back to all-pairs when qhull
    cannot triangulate (few or collinear sites)."""
    n = len(sites)
    if n <= 3:
        return {i: set(range(n)) - {i} for i in range(n)}
    try:
        vor = Voronoi(sites)
    except Exception:
        return {i: set(range(n)) - {i} for i in range(n)}
    nbrs: dict[int, set[int]] = {i: set() for i in range(n)}
    for i, j in vor.ridge_points:
        nbrs[int(i)].add(int(j))
        nbrs[int(j)].add(int(i))
    return nbrs


def voronoi_tessellation(sites: Sequence[Point | Sequence[float]],
                         boundary: ShapelyPolygon) -> list[ShapelyPolygon]:
    """Voronoi cells of the sites, clipped to the boundary polygon.

    Returns one polygon per site, in site order. Cells tile the boundary:
    they are pairwise interior-disjoint and their areas sum to the boundary
    area (up to floating-point roundoff).
    """
    validate_polygon(boundary)
    if len(sites) == 0:
        raise GeometryError("at least one site is required")
    arr = np.asarray([(s[0], s[1]) for s in sites], dtype=float)
    seen: dict[tuple[float, float], int] = {}
    for idx, (x, y) in enumerate(arr):
        key = (float(x), float(y))
        if key in seen:
            raise GeometryError(f"duplicate site at index {idx} (same as {seen[key]})")
        seen[key] = idx
    for idx, (x, y) in enumerate(arr):
        if not boundary.covers(ShapelyPoint(x, y)):
            raise GeometryError(f"site index {idx} lies outside the boundary")

    if len(arr) == 1:
        return [boundary]

    minx, miny, maxx, maxy = boundary.bounds
    pad = max(maxx - minx, maxy - miny) * 2.0 + 1.0
    bbox = [(minx - pad, miny - pad), (maxx + pad, miny - pad),
            (maxx + pad, maxy + pad), (minx - pad, maxy + pad)]
    nbrs = _neighbor_map(arr)

    cells: list[ShapelyPolygon] = []
    for i in range(len(arr)):
        ring = list(bbox)
        xi, yi = arr[i]
        for j in sorted(nbrs[i]):
            xj, yj = arr[j]
            # keep the side closer to site i: 2(sj-si)·p <= |sj|^2 - |si|^2
            a = 2.0 * (xj - xi)
            b = 2.0 * (yj - yi)
            c = (xj * xj + yj * yj) - (xi * xi + yi * yi)
            ring = _clip_by_halfplane(ring, a, b, c)
            if len(ring) < 3:
                break
        if len(ring) < 3:
            raise GeometryError(f"empty Voronoi cell for site index {i}")
        cell = ShapelyPolygon(ring).intersection(boundary)
        if cell.geom_type == "GeometryCollection" or cell.geom_type.startswith("Multi"):
            polys = [g for g in getattr(cell, "geoms", []) if g.geom_type == "Polygon"]
            cell = max(polys, key=lambda g: g.area) if polys else ShapelyPolygon()
        if cell.is_empty or cell.area <= 0.0:
            raise GeometryError(f"empty Voronoi cell for site index {i}")
        cells.append(cell)
    return cells


# --- nearest-feature index --------------------------------------------------

class SpatialIndex:
    """Immutable nearest-point index over (feature id, location) pairs.

    Lookup results are identical to a linear scan; equidistant features are
    resolved to the smallest feature id so pipelines stay deterministic.
    """

    def __init__(self, features: Iterable[tuple[object, Point | Sequence[float]]]):
        items = list(features)
        self._ids = [fid for fid, _ in items]
        self._pts = np.asarray([(p[0], p[1]) for _, p in items], dtype=float)
        self._tree = cKDTree(self._pts) if items else None

    def __len__(self) -> int:
        return len(self._ids)

    def nearest(self, point: Point | Sequence[float]) -> tuple[object, float]:
        """Feature id and distance of the feature closest to ``point``."""
        if self._tree is None:
            raise EmptySetError("nearest query on an empty index")
        p = (float(point[0]), float(point[1]))
        d, _ = self._tree.query(p)
        radius = d * (1.0 + 1e-12) + 1e-12
        candidates = self._tree.query_ball_point(p, radius)
        best_id = min(self._ids[i] for i in candidates)
        i = next(i for i in candidates if self._ids[i] == best_id)
        return best_id, math.hypot(self._pts[i][0] - p[0], self._pts[i][1] - p[1])


def nearest_feature(point: Point | Sequence[float],
                    index: SpatialIndex) -> tuple[object, float]:
    """Convenience wrapper over ``SpatialIndex.nearest``."""
    return index.nearest(point)
