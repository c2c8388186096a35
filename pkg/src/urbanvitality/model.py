"""Domain data model and file ingestion for the city layers.

Layers arrive as GeoJSON FeatureCollections in a projected, meter-unit CRS
(declared via a top-level ``"crs_units": "meters"`` member) plus one census
CSV keyed by block id. Ingestion validates everything up front and reports
the offending feature index; model objects are immutable afterwards.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from shapely.geometry import Point as ShapelyPoint, Polygon as ShapelyPolygon, shape
from shapely.geometry.base import BaseGeometry
from shapely.ops import unary_union

from .errors import DataError
from .geometry import Point, centroid, validate_polygon

PLACE_GROUPS = (
    "NightLife",
    "Art-night",
    "Services",
    "Eating-drinking",
    "Org. activity",
    "Outside",
    "Commercial",
)

# Flag mapping for the seven place groups. Daily-use covers errand-style
# venues; nightlife covers night-oriented ones; third places follow the
# four social-venue classes (eating/drinking, organized activity, outdoor,
# commercial). Overridable via configuration.
DEFAULT_CLASSIFICATION: dict[str, dict[str, bool]] = {
    "NightLife": {"daily_use": False, "nightlife": True, "third_place": False},
    "Art-night": {"daily_use": False, "nightlife": True, "third_place": False},
    "Services": {"daily_use": True, "nightlife": False, "third_place": False},
    "Eating-drinking": {"daily_use": True, "nightlife": False, "third_place": True},
    "Org. activity": {"daily_use": True, "nightlife": False, "third_place": True},
    "Outside": {"daily_use": True, "nightlife": False, "third_place": True},
    "Commercial": {"daily_use": False, "nightlife": False, "third_place": True},
}

VACUUM_KINDS = ("small_park", "large_park", "railway", "station", "highway", "water")
LANDUSE_CLASSES = ("residential", "work", "green-water")

SMALL_PARK_MAX_AREA = 1_000_000.0  # m²; parks at or above this are "large"
STATION_BUFFER_RADIUS = 600.0  # m; disks removed from railway geometry

AGE_BAND_COUNT = 9
FLOOR_BAND_COUNT = 4
APARTMENT_BAND_COUNT = 6

CENSUS_COLUMNS = (
    ["block_id", "P1", "E2", "E3"]
    + [f"E{i}" for i in range(8, 17)]
    + [f"E{i}" for i in range(17, 21)]
    + [f"E{i}" for i in range(21, 27)]
    + ["ADDETTI"]
)


@dataclass(frozen=True)
class PlaceFlags:
    daily_use: bool
    nightlife: bool
    third_place: bool


@dataclass(frozen=True)
class CensusAggregate:
    """Per-block (or per-district, once summed) census counts."""

    residents: int  # P1
    used_buildings: int  # E2
    residential_buildings: int  # E3
    age_band_counts: tuple[int, ...]  # E8..E16
    floor_band_counts: tuple[int, ...]  # E17..E20
    apartment_band_counts: tuple[int, ...]  # E21..E26
    employees: int  # ADDETTI

    def __post_init__(self) -> None:
        if len(self.age_band_counts) != AGE_BAND_COUNT:
            raise DataError("expected 9 age band counts (E8..E16)")
        if len(self.floor_band_counts) != FLOOR_BAND_COUNT:
            raise DataError("expected 4 floor band counts (E17..E20)")
        if len(self.apartment_band_counts) != APARTMENT_BAND_COUNT:
            raise DataError("expected 6 apartment band counts (E21..E26)")
        for v in self.as_row():
            if v < 0:
                raise DataError(f"negative census count: {v}")

    def as_row(self) -> list[int]:
        return (
            [self.residents, self.used_buildings, self.residential_buildings]
            + list(self.age_band_counts)
            + list(self.floor_band_counts)
            + list(self.apartment_band_counts)
            + [self.employees]
        )

    def __add__(self, other: "CensusAggregate") -> "CensusAggregate":
        return CensusAggregate(
            self.residents + other.residents,
            self.used_buildings + other.used_buildings,
            self.residential_buildings + other.residential_buildings,
            tuple(a + b for a, b in zip(self.age_band_counts, other.age_band_counts)),
            tuple(a + b for a, b in zip(self.floor_band_counts, other.floor_band_counts)),
            tuple(a + b for a, b in zip(self.apartment_band_counts, other.apartment_band_counts)),
            self.employees + other.employees,
        )

    @staticmethod
    def zero() -> "CensusAggregate":
        return CensusAggregate(0, 0, 0, (0,) * 9, (0,) * 4, (0,) * 6, 0)


@dataclass(frozen=True)
class Block:
    id: str
    district_id: str
    polygon: ShapelyPolygon
    centroid: Point


@dataclass(frozen=True)
class District:
    id: str
    polygon: BaseGeometry
    block_ids: frozenset[str]
    net_area: float
    census: CensusAggregate
    city: str | None = None


@dataclass(frozen=True)
class Place:
    id: str
    location: Point
    group: str
    flags: PlaceFlags


@dataclass(frozen=True)
class Company:
    id: str
    location: Point
    employees: int


@dataclass(frozen=True)
class VacuumFeature:
    id: str
    kind: str
    geometry: BaseGeometry
    natural: bool = False


@dataclass(frozen=True)
class LandUsePatch:
    polygon: ShapelyPolygon
    klass: str


@dataclass(frozen=True)
class StreetGraph:
    """Undirected planar street graph after suburban filtering."""

    nodes: tuple[Point, ...]
    segments: tuple[tuple[int, int], ...]  # node-index pairs, no self-loops


def classify_place(group: str,
                   overrides: Mapping[str, Mapping[str, bool]] | None = None) -> PlaceFlags:
    """Deterministic daily/nightlife/third-place flags for a place group."""
    table = dict(DEFAULT_CLASSIFICATION)
    if overrides:
        for g, flags in overrides.items():
            table[g] = {**table.get(g, {}), **flags}
    if group not in table:
        raise DataError(f"unknown place group: {group!r}")
    f = table[group]
    return PlaceFlags(bool(f["daily_use"]), bool(f["nightlife"]), bool(f["third_place"]))


# --- GeoJSON ingestion ------------------------------------------------------

def read_feature_collection(path: str | Path) -> list[dict]:
    """Parse a GeoJSON FeatureCollection and enforce the projected-CRS marker."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}") from exc
    if doc.get("type") != "FeatureCollection":
        raise DataError(f"{path}: not a GeoJSON FeatureCollection")
    if doc.get("crs_units") != "meters":
        raise DataError(f"{path}: missing 'crs_units': 'meters' (projected CRS required)")
    return doc.get("features", [])


def _feature_geometry(feat: dict, idx: int, path: str | Path) -> BaseGeometry:
    geom = feat.get("geometry")
    if geom is None:
        raise DataError(f"{path}: feature {idx} has no geometry")
    return shape(geom)


def _feature_polygon(feat: dict, idx: int, path: str | Path) -> ShapelyPolygon:
    geom = _feature_geometry(feat, idx, path)
    if not isinstance(geom, ShapelyPolygon):
        raise DataError(f"{path}: feature {idx}: expected Polygon, got {geom.geom_type}")
    try:
        validate_polygon(geom)
    except Exception as exc:
        raise DataError(f"{path}: feature {idx}: {exc}") from exc
    return geom


def _prop(feat: dict, name: str, idx: int, path: str | Path):
    props = feat.get("properties") or {}
    if name not in props or props[name] is None:
        raise DataError(f"{path}: feature {idx}: missing property {name!r}")
    return props[name]


def load_blocks(path: str | Path) -> list[Block]:
    feats = read_feature_collection(path)
    blocks = []
    seen: set[str] = set()
    for idx, feat in enumerate(feats):
        poly = _feature_polygon(feat, idx, path)
        bid = str(_prop(feat, "id", idx, path))
        did = str(_prop(feat, "district_id", idx, path))
        if bid in seen:
            raise DataError(f"{path}: feature {idx}: duplicate block id {bid!r}")
        seen.add(bid)
        blocks.append(Block(bid, did, poly, centroid(poly)))
    return blocks


def load_landuse(path: str | Path) -> list[LandUsePatch]:
    feats = read_feature_collection(path)
    patches = []
    for idx, feat in enumerate(feats):
        poly = _feature_polygon(feat, idx, path)
        klass = str(_prop(feat, "klass", idx, path))
        if klass not in LANDUSE_CLASSES:
            raise DataError(f"{path}: feature {idx}: unknown land-use class {klass!r}")
        patches.append(LandUsePatch(poly, klass))
    return patches


def load_vacuums(path: str | Path,
                 small_park_max_area: float = SMALL_PARK_MAX_AREA) -> list[VacuumFeature]:
    feats = read_feature_collection(path)
    out = []
    for idx, feat in enumerate(feats):
        kind = str(_prop(feat, "kind", idx, path))
        if kind not in VACUUM_KINDS:
            raise DataError(f"{path}: feature {idx}: unknown vacuum kind {kind!r}")
        geom = _feature_geometry(feat, idx, path)
        if kind == "station":
            if not isinstance(geom, (ShapelyPoint, ShapelyPolygon)):
                raise DataError(f"{path}: feature {idx}: station must be Point or Polygon")
        else:
            if isinstance(geom, ShapelyPolygon):
                try:
                    validate_polygon(geom)
                except Exception as exc:
                    raise DataError(f"{path}: feature {idx}: {exc}") from exc
        if kind == "small_park" and geom.area >= small_park_max_area:
            raise DataError(
                f"{path}: feature {idx}: small_park area {geom.area:.0f} m² exceeds threshold")
        if kind == "large_park" and geom.area < small_park_max_area:
            raise DataError(
                f"{path}: feature {idx}: large_park area {geom.area:.0f} m² below threshold")
        props = feat.get("properties") or {}
        fid = str(props.get("id", f"{kind}_{idx}"))
        out.append(VacuumFeature(fid, kind, geom, bool(props.get("natural", False))))
    return out


def apply_station_buffers(vacuums: Sequence[VacuumFeature],
                          radius: float = STATION_BUFFER_RADIUS) -> list[VacuumFeature]:
    """Subtract station disk buffers from railway geometry.

    Stations act as pedestrian hubs rather than obstacles, so a disk around
    each one is removed from the railway features before closeness is
    computed. Railways left empty are dropped.
    """
    stations = [v for v in vacuums if v.kind == "station"]
    if not stations:
        return [v for v in vacuums if v.kind != "station"]
    buffers = unary_union([v.geometry.buffer(radius) for v in stations])
    out = []
    for v in vacuums:
        if v.kind == "station":
            continue
        if v.kind == "railway":
            trimmed = v.geometry.difference(buffers)
            if trimmed.is_empty or trimmed.area <= 0.0:
                continue
            out.append(VacuumFeature(v.id, v.kind, trimmed, v.natural))
        else:
            out.append(v)
    return out


def load_places(path: str | Path,
                classification: Mapping[str, Mapping[str, bool]] | None = None
                ) -> tuple[list[Place], list[Company]]:
    """Load the places layer; features with group ``Company`` become companies."""
    feats = read_feature_collection(path)
    places: list[Place] = []
    companies: list[Company] = []
    for idx, feat in enumerate(feats):
        geom = _feature_geometry(feat, idx, path)
        if not isinstance(geom, ShapelyPoint):
            raise DataError(f"{path}: feature {idx}: expected Point geometry")
        loc = Point(geom.x, geom.y)
        pid = str(_prop(feat, "id", idx, path))
        group = str(_prop(feat, "group", idx, path))
        if group == "Company":
            emp = _prop(feat, "employees", idx, path)
            if int(emp) < 0:
                raise DataError(f"{path}: feature {idx}: negative employee count")
            companies.append(Company(pid, loc, int(emp)))
            continue
        try:
            flags = classify_place(group, classification)
        except DataError as exc:
            raise DataError(f"{path}: feature {idx}: {exc}") from exc
        places.append(Place(pid, loc, group, flags))
    return places, companies


def load_streets(path: str | Path) -> StreetGraph:
    """Build the undirected street graph from a LineString layer."""
    feats = read_feature_collection(path)
    node_index: dict[tuple[float, float], int] = {}
    nodes: list[Point] = []
    segments: set[tuple[int, int]] = set()

    def node_id(x: float, y: float) -> int:
        key = (float(x), float(y))
        if key not in node_index:
            node_index[key] = len(nodes)
            nodes.append(Point(*key))
        return node_index[key]

    for idx, feat in enumerate(feats):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            raise DataError(f"{path}: feature {idx}: expected LineString")
        coords = geom.get("coordinates") or []
        if len(coords) < 2:
            raise DataError(f"{path}: feature {idx}: LineString needs >= 2 points")
        ids = [node_id(x, y) for x, y in coords]
        for a, b in zip(ids, ids[1:]):
            if a == b:
                continue  # self-loop from repeated vertex
            segments.add((min(a, b), max(a, b)))
    return StreetGraph(tuple(nodes), tuple(sorted(segments)))


def detect_intersections(graph: StreetGraph) -> list[Point]:
    """Street nodes where three or more segments meet."""
    degree = [0] * len(graph.nodes)
    for a, b in graph.segments:
        degree[a] += 1
        degree[b] += 1
    return [graph.nodes[i] for i, d in enumerate(degree) if d >= 3]


# --- census -----------------------------------------------------------------

def load_census_table(path: str | Path) -> dict[str, CensusAggregate]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CENSUS_COLUMNS:
            raise DataError(
                f"{path}: bad header; expected {','.join(CENSUS_COLUMNS)}")
        out: dict[str, CensusAggregate] = {}
        for rownum, row in enumerate(reader, start=2):
            bid = row["block_id"]
            if bid in out:
                raise DataError(f"{path}: line {rownum}: duplicate block id {bid!r}")
            try:
                vals = {k: int(row[k]) for k in CENSUS_COLUMNS[1:]}
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {rownum}: non-integer count") from exc
            for k, v in vals.items():
                if v < 0:
                    raise DataError(f"{path}: line {rownum}: negative count in {k}")
            out[bid] = CensusAggregate(
                vals["P1"], vals["E2"], vals["E3"],
                tuple(vals[f"E{i}"] for i in range(8, 17)),
                tuple(vals[f"E{i}"] for i in range(17, 21)),
                tuple(vals[f"E{i}"] for i in range(21, 27)),
                vals["ADDETTI"],
            )
    return out


# --- district assembly ------------------------------------------------------

def assemble_districts(blocks: Sequence[Block],
                       census: Mapping[str, CensusAggregate],
                       vacuums: Sequence[VacuumFeature] = (),
                       exclusion_kinds: Iterable[str] = ("water", "natural_large_park"),
                       city: str | None = None) -> list[District]:
    """Group blocks into districts and join the census counts.

    The district polygon is the dissolved union of its member blocks; the
    net area subtracts the configured exclusion features (by default water
    plus large parks flagged ``natural``).
    """
    if not blocks:
        raise DataError("no blocks to assemble")
    missing = [b.id for b in blocks if b.id not in census]
    if missing:
        raise DataError(f"blocks without census record: {missing[:5]}")
    known = {b.id for b in blocks}
    unknown = [bid for bid in census if bid not in known]
    if unknown:
        raise DataError(f"census rows for unknown block ids: {unknown[:5]}")

    by_district: dict[str, list[Block]] = {}
    for b in blocks:
        if not b.district_id:
            raise DataError(f"block {b.id!r} has no district (orphan block)")
        by_district.setdefault(b.district_id, []).append(b)

    kinds = set(exclusion_kinds)
    excluded = [
        v.geometry for v in vacuums
        if v.kind in kinds or (v.kind == "large_park" and v.natural
                               and "natural_large_park" in kinds)
    ]
    exclusion_union = unary_union(excluded) if excluded else None

    districts = []
    for did in sorted(by_district):
        members = by_district[did]
        poly = unary_union([b.polygon for b in members])
        if poly.is_empty or poly.area <= 0.0:
            raise DataError(f"district {did!r} has empty geometry")
        agg = CensusAggregate.zero()
        for b in members:
            agg = agg + census[b.id]
        net = poly.area
        if exclusion_union is not None:
            net -= poly.intersection(exclusion_union).area
        if net <= 0.0:
            raise DataError(f"district {did!r} has non-positive net area")
        districts.append(District(did, poly, frozenset(b.id for b in members),
                                  net, agg, city))
    return districts
