"""District-level mobile-Internet activity via Voronoi cell weighting.

Radio-cell connection counts arrive as hourly records; each station's
Voronoi cell (clipped to the city boundary, sea area removed) spreads its
count over the districts it overlaps. The vitality proxy is the mean hourly
district count over business days, divided by the district net area.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from shapely import STRtree
from shapely.geometry import Point as ShapelyPoint
from shapely.geometry.base import BaseGeometry
from shapely.ops import unary_union

from .errors import DataError
from .geometry import Point, voronoi_tessellation
from .model import District, VacuumFeature, read_feature_collection


@dataclass(frozen=True)
class RadioStation:
    id: str
    location: Point


@dataclass(frozen=True)
class CellCoverage:
    """Voronoi cell of one radio station, clipped to the city boundary."""

    station_id: str
    polygon: BaseGeometry
    total_area: float
    water_area: float

    @property
    def effective_area(self) -> float:
        return self.total_area - self.water_area

    @property
    def usable(self) -> bool:
        return self.effective_area > 1e-9


@dataclass(frozen=True)
class BusinessCalendar:
    """Mon-Fri, minus configured holidays."""

    holidays: frozenset[dt.date] = frozenset()

    def is_business_hour(self, when: dt.datetime) -> bool:
        return when.weekday() < 5 and when.date() not in self.holidays


@dataclass
class ActivityTable:
    """Hourly connection counts per station, aligned to hour boundaries."""

    hours: list[dt.datetime] = field(default_factory=list)
    counts: dict[dt.datetime, dict[str, float]] = field(default_factory=dict)

    def add(self, station_id: str, when: dt.datetime, connections: float) -> None:
        if when.minute or when.second or when.microsecond:
            raise DataError(f"timestamp not aligned to an hour boundary: {when}")
        if connections < 0:
            raise DataError(f"negative connection count for {station_id} at {when}")
        if when not in self.counts:
            self.counts[when] = {}
            self.hours.append(when)
        self.counts[when][station_id] = self.counts[when].get(station_id, 0.0) + connections

    def sorted_hours(self) -> list[dt.datetime]:
        return sorted(self.counts)


def load_stations(path: str | Path) -> tuple[list[RadioStation], dict[str, str]]:
    """Load radio stations, deduplicating exact location duplicates.

    Returns the stations plus an alias map from dropped ids to the id kept
    at that location, so records can still be aggregated.
    """
    feats = read_feature_collection(path)
    stations: list[RadioStation] = []
    by_loc: dict[tuple[float, float], str] = {}
    alias: dict[str, str] = {}
    for idx, feat in enumerate(feats):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            raise DataError(f"{path}: feature {idx}: expected Point geometry")
        x, y = geom["coordinates"]
        props = feat.get("properties") or {}
        if "id" not in props:
            raise DataError(f"{path}: feature {idx}: missing property 'id'")
        sid = str(props["id"])
        key = (float(x), float(y))
        if key in by_loc:
            alias[sid] = by_loc[key]
            continue
        by_loc[key] = sid
        stations.append(RadioStation(sid, Point(*key)))
    return stations, alias


def load_activity_csv(path: str | Path,
                      alias: Mapping[str, str] | None = None) -> ActivityTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    table = ActivityTable()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["station_id", "iso_hour", "connections"]
        if reader.fieldnames != expected:
            raise DataError(f"{path}: bad header; expected {','.join(expected)}")
        for rownum, row in enumerate(reader, start=2):
            sid = row["station_id"]
            if alias:
                sid = alias.get(sid, sid)
            try:
                when = dt.datetime.fromisoformat(row["iso_hour"])
                conn = float(row["connections"])
            except ValueError as exc:
                raise DataError(f"{path}: line {rownum}: {exc}") from exc
            try:
                table.add(sid, when, conn)
            except DataError as exc:
                raise DataError(f"{path}: line {rownum}: {exc}") from exc
    if not table.counts:
        raise DataError(f"{path}: no activity records")
    return table


def build_cell_coverage(stations: Sequence[RadioStation],
                        boundary: BaseGeometry,
                        water: Sequence[VacuumFeature] = ()) -> list[CellCoverage]:
    """Voronoi cells for the stations, with water overlap measured per cell."""
    outside = [s.id for s in stations
               if not boundary.covers(ShapelyPoint(s.location))]
    if outside:
        raise DataError(f"stations outside the city boundary: {outside[:5]}")
    cells = voronoi_tessellation([s.location for s in stations], boundary)
    water_geoms = [v.geometry for v in water if v.kind == "water"]
    water_union = unary_union(water_geoms) if water_geoms else None
    out = []
    for station, cell in zip(stations, cells):
        total = cell.area
        warea = cell.intersection(water_union).area if water_union is not None else 0.0
        out.append(CellCoverage(station.id, cell, total, warea))
    return out


class ActivityAggregator:
    """Precomputed district x cell weight matrix for fast hourly aggregation.

    The weight of cell v in district i is area(v ∩ i) / (area(v) − water(v)).
    Cells with zero effective area are skipped and counted as warnings.
    """

    def __init__(self, districts: Sequence[District],
                 cells: Sequence[CellCoverage]):
        self.districts = list(districts)
        self.cells = list(cells)
        self.station_order = [c.station_id for c in cells]
        self.skipped_cells = [c.station_id for c in cells if not c.usable]
        tree = STRtree([c.polygon for c in cells])
        w = np.zeros((len(districts), len(cells)))
        for i, d in enumerate(districts):
            for j in tree.query(d.polygon):
                cell = self.cells[int(j)]
                if not cell.usable:
                    continue
                inter = cell.polygon.intersection(d.polygon).area
                if inter > 0.0:
                    w[i, int(j)] = inter / cell.effective_area
        self.weights = w

    def hour_vector(self, counts: Mapping[str, float]) -> tuple[np.ndarray, int]:
        """Per-station counts in cell order; missing stations count as zero."""
        r = np.zeros(len(self.cells))
        n_missing = 0
        for j, sid in enumerate(self.station_order):
            if sid in counts:
                r[j] = counts[sid]
            else:
                n_missing += 1
        return r, n_missing

    def district_totals(self, counts: Mapping[str, float]) -> np.ndarray:
        r, _ = self.hour_vector(counts)
        return self.weights @ r


def district_activity(district: District, cells: Sequence[CellCoverage],
                      records: ActivityTable, t: dt.datetime) -> float:
    """Weighted connection count for one district at one hour."""
    agg = ActivityAggregator([district], cells)
    return float(agg.district_totals(records.counts.get(t, {}))[0])


@dataclass(frozen=True)
class DensityRow:
    district_id: str
    activity_density: float | None
    hours_used: int
    flag: str | None = None


def compute_activity_densities(districts: Sequence[District],
                               cells: Sequence[CellCoverage],
                               records: ActivityTable,
                               calendar: BusinessCalendar = BusinessCalendar()
                               ) -> list[DensityRow]:
    """Business-day mean hourly activity per district, per m² of net area.

    All business-day hours in the record span are pooled into one flat mean.
    """
    agg = ActivityAggregator(districts, cells)
    hours = [h for h in records.sorted_hours() if calendar.is_business_hour(h)]
    if not hours:
        return [DensityRow(d.id, None, 0, "no-business-day-records")
                for d in districts]
    totals = np.zeros(len(districts))
    for h in hours:
        totals += agg.district_totals(records.counts[h])
    means = totals / len(hours)
    return [DensityRow(d.id, float(means[i]) / d.net_area, len(hours))
            for i, d in enumerate(districts)]


def write_density_csv(rows: Sequence[DensityRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["district_id", "activity_density", "hours_used"])
        for row in rows:
            value = "" if row.activity_density is None else repr(row.activity_density)
            writer.writerow([row.district_id, value, row.hours_used])


def read_density_csv(path) -> dict[str, tuple[float | None, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = {}
        for row in reader:
            cell = row["activity_density"]
            out[row["district_id"]] = (
                float(cell) if cell not in ("", None) else None,
                int(row["hours_used"]),
            )
    return out
