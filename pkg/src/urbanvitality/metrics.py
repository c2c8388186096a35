"""Per-district urban-diversity metrics.

Twenty-five metrics covering land use, block shape, building age,
concentration, and border vacuums. Each metric is either a real value or an
explicit missing marker with a reason code; nothing is imputed. Densities
and closeness values use the district net area and meter units throughout.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from shapely import STRtree
from shapely.geometry import Point as ShapelyPoint

from .geometry import SpatialIndex, min_enclosing_circle
from .model import (
    Block,
    Company,
    District,
    LandUsePatch,
    Place,
    StreetGraph,
    VacuumFeature,
    detect_intersections,
)

METRIC_NAMES = (
    "lum",
    "closeness_small_parks",
    "rnr",
    "housing_types",
    "commercial",
    "nightlife",
    "nightlife_density",
    "daily",
    "third_places",
    "mean_block_area",
    "intersection_density",
    "anisotropicity",
    "avg_building_age",
    "std_building_age",
    "employees_per_company",
    "population_density",
    "employment_density",
    "pop_emp_ratio",
    "apartments_per_building",
    "density_daily_places",
    "density_nondaily_places",
    "closeness_large_parks",
    "closeness_railways",
    "closeness_highways",
    "closeness_water",
)

CONDITION_GROUPS: dict[str, tuple[str, ...]] = {
    "land_use": ("lum", "closeness_small_parks", "rnr", "housing_types",
                 "commercial", "nightlife", "nightlife_density", "daily",
                 "third_places"),
    "small_blocks": ("mean_block_area", "intersection_density", "anisotropicity"),
    "aged_buildings": ("avg_building_age", "std_building_age",
                       "employees_per_company"),
    "concentration": ("population_density", "employment_density", "pop_emp_ratio",
                      "apartments_per_building", "density_daily_places",
                      "density_nondaily_places"),
    "vacuums": ("closeness_large_parks", "closeness_railways",
                "closeness_highways", "closeness_water"),
}

# Default ISTAT band interpretations. The first age band is open-ended
# ("built before 1919") and needs a floor; the remaining eight partition
# [1919, 2011]. The top floor band ("4+") is valued at its lower bound.
DEFAULT_AGE_BANDS: tuple[tuple[int, int], ...] = (
    (1900, 1918), (1919, 1945), (1946, 1960), (1961, 1970), (1971, 1980),
    (1981, 1990), (1991, 2000), (2001, 2005), (2006, 2011),
)
DEFAULT_FLOOR_VALUES: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
DEFAULT_APARTMENT_MIDPOINTS: tuple[float, ...] = (1.0, 2.0, 3.5, 7.0, 12.0, 20.0)


@dataclass(frozen=True)
class MetricConfig:
    reference_year: int = 2011
    age_bands: tuple[tuple[int, int], ...] = DEFAULT_AGE_BANDS
    floor_values: tuple[float, ...] = DEFAULT_FLOOR_VALUES
    apartment_midpoints: tuple[float, ...] = DEFAULT_APARTMENT_MIDPOINTS
    # When True, the building-age spread uses a count-weighted variance of
    # band ages instead of the default count-variance expression.
    age_std_weighted: bool = False


@dataclass
class FeatureVector:
    """All metrics for one district, with per-metric missing/warning codes."""

    district_id: str
    values: dict[str, float | None] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    def set(self, name: str, value: float | None, flag: str | None = None) -> None:
        self.values[name] = value
        if flag:
            self.flags[name] = flag

    def get(self, name: str) -> float | None:
        return self.values.get(name)


# --- individual metrics -----------------------------------------------------

def land_use_mix(class_areas: Mapping[str, float], n_classes: int = 3) -> float | None:
    """Normalized entropy of land-class area shares; None when nothing is classified."""
    total = sum(class_areas.values())
    if total <= 0.0:
        return None
    acc = 0.0
    for area in class_areas.values():
        p = area / total
        if p > 0.0:
            acc -= p * math.log(p)
    return acc / math.log(n_classes)


def rnr_balance(res_area: float, nonres_area: float) -> float | None:
    """Residential / non-residential balance in [0, 1]; None when both are zero."""
    total = res_area + nonres_area
    if total <= 0.0:
        return None
    return 1.0 - abs(res_area - nonres_area) / total


def mean_block_closeness(blocks: Sequence[Block],
                         index: SpatialIndex) -> tuple[float, str | None]:
    """Inverse of the mean block-centroid distance to the nearest feature.

    An empty feature set means the nearest feature is infinitely far, so the
    closeness is 0; a data-coverage warning accompanies that value.
    """
    if len(index) == 0:
        return 0.0, "empty-feature-set"
    total = 0.0
    for b in blocks:
        _, d = index.nearest(b.centroid)
        total += d
    mean = total / len(blocks)
    if mean == 0.0:
        return math.inf, "zero-distance"
    return 1.0 / mean, None


def housing_types(floor_band_counts: Sequence[int],
                  floor_values: Sequence[float] = DEFAULT_FLOOR_VALUES) -> float | None:
    total = sum(floor_band_counts)
    if total == 0:
        return None
    return sum(c * z for c, z in zip(floor_band_counts, floor_values)) / total


def place_shares(places: Sequence[Place]) -> tuple[float | None, float | None, float | None]:
    """(non-daily share, nightlife share, third-place share) of district places."""
    n = len(places)
    if n == 0:
        return None, None, None
    commercial = sum(1 for p in places if not p.flags.daily_use) / n
    nightlife = sum(1 for p in places if p.flags.nightlife) / n
    third = sum(1 for p in places if p.flags.third_place) / n
    return commercial, nightlife, third


def place_densities(places: Sequence[Place],
                    net_area: float) -> tuple[float, float, float]:
    """(nightlife, daily, non-daily) place counts per m² of net area."""
    nightlife = sum(1 for p in places if p.flags.nightlife)
    daily = sum(1 for p in places if p.flags.daily_use)
    nondaily = sum(1 for p in places if not p.flags.daily_use)
    return nightlife / net_area, daily / net_area, nondaily / net_area


def block_shape_metrics(blocks: Sequence[Block], n_intersections: int,
                        net_area: float) -> tuple[float, float, float]:
    """(mean block area, intersection density, mean anisotropicity)."""
    areas = [b.polygon.area for b in blocks]
    mean_area = sum(areas) / len(blocks)
    phi_total = 0.0
    for b, area in zip(blocks, areas):
        circle = min_enclosing_circle(b.polygon)
        phi_total += area / (math.pi * circle.radius ** 2)
    return mean_area, n_intersections / net_area, phi_total / len(blocks)


def building_age_stats(age_band_counts: Sequence[int],
                       config: MetricConfig = MetricConfig()
                       ) -> tuple[float | None, float | None]:
    """Mean building age and its band-based spread for a district."""
    counts = np.asarray(age_band_counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return None, None
    last = config.reference_year
    old = np.asarray([((last - start) + (last - end)) / 2.0
                      for start, end in config.age_bands])
    avg = float((counts * old).sum() / total)
    if config.age_std_weighted:
        spread = float(math.sqrt((counts * (old - avg) ** 2).sum() / total))
    else:
        spread = float(counts.dot(counts) / total ** 2 * counts.var())
    return avg, spread


def concentration_metrics(census, net_area: float,
                          apartment_midpoints: Sequence[float] = DEFAULT_APARTMENT_MIDPOINTS
                          ) -> tuple[float, float, float | None, float | None]:
    """(population density, employment density, pop/emp ratio, apartments per building)."""
    pop_density = census.residents / net_area
    emp_density = census.employees / net_area
    ratio = pop_density / emp_density if census.employees > 0 else None
    if census.used_buildings > 0:
        apartments = sum(m * c for m, c in
                         zip(apartment_midpoints, census.apartment_band_counts))
        per_building = apartments / census.used_buildings
    else:
        per_building = None
    return pop_density, emp_density, ratio, per_building


def employees_per_company(companies: Sequence[Company]) -> float | None:
    if not companies:
        return None
    return sum(c.employees for c in companies) / len(companies)


# --- per-district assembly --------------------------------------------------

_CLOSENESS_METRICS = (
    ("closeness_small_parks", "small_park"),
    ("closeness_large_parks", "large_park"),
    ("closeness_railways", "railway"),
    ("closeness_highways", "highway"),
    ("closeness_water", "water"),
)


@dataclass(frozen=True)
class _CityIndexes:
    """Prebuilt spatial structures shared across per-district computations."""

    blocks_by_district: dict[str, list[Block]]
    patch_tree: STRtree
    patches: Sequence[LandUsePatch]
    place_points: Sequence[ShapelyPoint]
    places: Sequence[Place]
    place_tree: STRtree | None
    company_points: Sequence[ShapelyPoint]
    companies: Sequence[Company]
    company_tree: STRtree | None
    intersection_points: Sequence[ShapelyPoint]
    intersection_tree: STRtree | None
    vacuum_indexes: dict[str, SpatialIndex]
    daily_index: SpatialIndex


def _build_indexes(districts: Sequence[District], blocks: Sequence[Block],
                   patches: Sequence[LandUsePatch], places: Sequence[Place],
                   companies: Sequence[Company],
                   vacuums: Sequence[VacuumFeature],
                   streets: StreetGraph) -> _CityIndexes:
    by_district: dict[str, list[Block]] = {}
    for b in blocks:
        by_district.setdefault(b.district_id, []).append(b)

    patch_tree = STRtree([p.polygon for p in patches]) if patches else STRtree([])
    place_points = [ShapelyPoint(p.location) for p in places]
    place_tree = STRtree(place_points) if places else None
    company_points = [ShapelyPoint(c.location) for c in companies]
    company_tree = STRtree(company_points) if companies else None
    nodes = detect_intersections(streets)
    ipoints = [ShapelyPoint(p) for p in nodes]
    itree = STRtree(ipoints) if ipoints else None

    vacuum_indexes = {}
    for kind in ("small_park", "large_park", "railway", "highway", "water"):
        feats = [v for v in vacuums if v.kind == kind]
        vacuum_indexes[kind] = SpatialIndex(
            (v.id, (v.geometry.centroid.x, v.geometry.centroid.y)) for v in feats)
    daily_index = SpatialIndex(
        (p.id, p.location) for p in places if p.flags.daily_use)

    return _CityIndexes(by_district, patch_tree, patches, place_points, places,
                        place_tree, company_points, companies, company_tree,
                        ipoints, itree, vacuum_indexes, daily_index)


def _district_vector(district: District, idx: _CityIndexes,
                     config: MetricConfig) -> FeatureVector:
    fv = FeatureVector(district.id)
    poly = district.polygon
    blocks = idx.blocks_by_district.get(district.id, [])
    if not blocks:
        raise ValueError(f"district {district.id!r} has no blocks")

    # Land-class areas within the district polygon.
    class_areas = {"residential": 0.0, "work": 0.0, "green-water": 0.0}
    for pi in idx.patch_tree.query(poly):
        patch = idx.patches[int(pi)]
        if not patch.polygon.intersects(poly):
            continue
        class_areas[patch.klass] += patch.polygon.intersection(poly).area

    lum = land_use_mix(class_areas)
    fv.set("lum", lum, None if lum is not None else "no-classified-land")
    rnr = rnr_balance(class_areas["residential"], class_areas["work"])
    fv.set("rnr", rnr, None if rnr is not None else "no-res-or-work-land")

    # Places fall to a district by polygon membership (boundary inclusive).
    if idx.place_tree is not None:
        cand = idx.place_tree.query(poly)
        district_places = [idx.places[int(i)] for i in cand
                           if poly.covers(idx.place_points[int(i)])]
    else:
        district_places = []
    commercial, nightlife, third = place_shares(district_places)
    missing = "no-places" if not district_places else None
    fv.set("commercial", commercial, missing)
    fv.set("nightlife", nightlife, missing)
    fv.set("third_places", third, missing)
    nd, dd, ndd = place_densities(district_places, district.net_area)
    fv.set("nightlife_density", nd)
    fv.set("density_daily_places", dd)
    fv.set("density_nondaily_places", ndd)

    value, flag = mean_block_closeness(blocks, idx.daily_index)
    fv.set("daily", value, flag)
    for name, kind in _CLOSENESS_METRICS:
        value, flag = mean_block_closeness(blocks, idx.vacuum_indexes[kind])
        fv.set(name, value, flag)

    # Street intersections sitting exactly on a district border are not
    # attributed to any district (strict containment avoids double counting).
    if idx.intersection_tree is not None:
        n_inter = sum(1 for i in idx.intersection_tree.query(poly)
                      if poly.contains(idx.intersection_points[int(i)]))
    else:
        n_inter = 0
    mean_area, inter_density, phi = block_shape_metrics(blocks, n_inter,
                                                        district.net_area)
    fv.set("mean_block_area", mean_area)
    fv.set("intersection_density", inter_density)
    fv.set("anisotropicity", phi)

    ht = housing_types(district.census.floor_band_counts, config.floor_values)
    fv.set("housing_types", ht, None if ht is not None else "zero-buildings")
    avg_age, std_age = building_age_stats(district.census.age_band_counts, config)
    age_flag = None if avg_age is not None else "zero-buildings"
    fv.set("avg_building_age", avg_age, age_flag)
    fv.set("std_building_age", std_age, age_flag)

    if idx.company_tree is not None:
        cand = idx.company_tree.query(poly)
        district_companies = [idx.companies[int(i)] for i in cand
                              if poly.covers(idx.company_points[int(i)])]
    else:
        district_companies = []
    epc = employees_per_company(district_companies)
    fv.set("employees_per_company", epc,
           None if epc is not None else "no-companies")

    pd, ed, ratio, apb = concentration_metrics(district.census, district.net_area,
                                               config.apartment_midpoints)
    fv.set("population_density", pd)
    fv.set("employment_density", ed)
    fv.set("pop_emp_ratio", ratio, None if ratio is not None else "zero-employment")
    fv.set("apartments_per_building", apb,
           None if apb is not None else "zero-buildings")
    return fv


def compute_feature_vector(district: District, blocks: Sequence[Block],
                           patches: Sequence[LandUsePatch],
                           places: Sequence[Place],
                           companies: Sequence[Company],
                           vacuums: Sequence[VacuumFeature],
                           streets: StreetGraph,
                           config: MetricConfig = MetricConfig()) -> FeatureVector:
    """All 25 metrics for a single district."""
    idx = _build_indexes([district], blocks, patches, places, companies,
                         vacuums, streets)
    return _district_vector(district, idx, config)


def compute_all_features(districts: Sequence[District], blocks: Sequence[Block],
                         patches: Sequence[LandUsePatch],
                         places: Sequence[Place],
                         companies: Sequence[Company],
                         vacuums: Sequence[VacuumFeature],
                         streets: StreetGraph,
                         config: MetricConfig = MetricConfig(),
                         jobs: int = 1) -> list[FeatureVector]:
    """Feature vectors for every district, sharing one set of spatial indexes.

    Per-district computation is pure over immutable inputs, so districts may
    be processed concurrently; the output order always follows the input.
    """
    idx = _build_indexes(districts, blocks, patches, places, companies,
                         vacuums, streets)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda d: _district_vector(d, idx, config),
                                 districts))
    return [_district_vector(d, idx, config) for d in districts]


# --- CSV output -------------------------------------------------------------

def write_features_csv(vectors: Sequence[FeatureVector], path,
                       flags_path=None) -> None:
    """Write one row per district; missing metrics become empty cells.

    Reason codes go to the sibling flags file when a path is given.
    """
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["district_id", *METRIC_NAMES])
        for fv in vectors:
            row = [fv.district_id]
            for name in METRIC_NAMES:
                v = fv.get(name)
                row.append("" if v is None else repr(float(v)))
            writer.writerow(row)
    if flags_path is not None:
        with open(flags_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["district_id", "metric", "flag"])
            for fv in vectors:
                for name in METRIC_NAMES:
                    if name in fv.flags:
                        writer.writerow([fv.district_id, name, fv.flags[name]])


def read_features_csv(path) -> tuple[list[str], dict[str, list[float | None]]]:
    """Read a features table back into (district ids, column map)."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        ids: list[str] = []
        columns: dict[str, list[float | None]] = {n: [] for n in METRIC_NAMES}
        for row in reader:
            ids.append(row["district_id"])
            for n in METRIC_NAMES:
                cell = row.get(n, "")
                columns[n].append(float(cell) if cell not in ("", None) else None)
    return ids, columns
