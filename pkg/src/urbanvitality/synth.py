"""Deterministic synthetic-city generator for end-to-end testing.

Builds a gridded city (m x n square blocks, k x k blocks per district) with
land use, census counts, places, companies, border features, streets,
radio stations, and an hourly activity trace. Every metric the pipeline
computes is also derived here in closed form, independently of the metrics
module, and written to a ground-truth table. The activity trace is solved
so that district aggregation recovers the planted activity densities.

The planted regression model is
``ln(activity_density) = ln(base) + sum(beta * zscore(metric)) + noise``.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import (
    DEFAULT_AGE_BANDS,
    DEFAULT_APARTMENT_MIDPOINTS,
    DEFAULT_FLOOR_VALUES,
    METRIC_NAMES,
)

PLACE_GROUP_FLAGS = {
    "NightLife": (False, True, False),  # (daily, nightlife, third)
    "Art-night": (False, True, False),
    "Services": (True, False, False),
    "Eating-drinking": (True, False, True),
    "Org. activity": (True, False, True),
    "Outside": (True, False, True),
    "Commercial": (False, False, True),
}

DEFAULT_PLACE_INTENSITY = {
    "NightLife": 2.0,
    "Art-night": 1.0,
    "Services": 3.0,
    "Eating-drinking": 6.0,
    "Org. activity": 2.0,
    "Outside": 2.0,
    "Commercial": 5.0,
}


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    grid_rows: int = 6  # blocks
    grid_cols: int = 6
    block_size: float = 100.0  # meters
    district_k: int = 3  # district = k x k blocks
    place_intensity: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_PLACE_INTENSITY))
    station_count: int = 12
    planted_betas: dict[str, float] = field(default_factory=dict)
    noise_sd: float = 0.0
    days: int = 7
    start_date: dt.date = dt.date(2014, 3, 3)  # a Monday
    alley_max: int = 6  # extra in-district street crossings, 0..alley_max
    base_density: float = 1e-4  # connections per m², geometric center

    def validate(self) -> None:
        if self.grid_rows < 3 or self.grid_cols < 3:
            raise ConfigError("grid must be at least 3x3 blocks")
        if self.district_k < 1 or self.grid_rows % self.district_k \
                or self.grid_cols % self.district_k:
            raise ConfigError("district_k must divide both grid dimensions")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.station_count < 1:
            raise ConfigError("station_count must be >= 1")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        for m in self.planted_betas:
            if m not in METRIC_NAMES:
                raise ConfigError(f"planted beta for unknown metric {m!r}")


@dataclass
class SynthResult:
    outdir: Path
    district_ids: list[str]
    ground_truth: dict[str, list[float | None]]  # metric -> per-district values
    activity_density: list[float]
    net_areas: list[float]
    planted_betas: dict[str, float]
    signal_variance: float
    noise_sd: float
    paths: dict[str, Path]


def _rect_ring(x0: float, y0: float, x1: float, y1: float) -> list[list[float]]:
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def _polygon_feature(ring: list[list[float]], props: dict) -> dict:
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "Polygon", "coordinates": [ring]}}


def _point_feature(x: float, y: float, props: dict) -> dict:
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "Point", "coordinates": [x, y]}}


def _line_feature(coords: list[list[float]], props: dict | None = None) -> dict:
    return {"type": "Feature", "properties": props or {},
            "geometry": {"type": "LineString", "coordinates": coords}}


def _write_geojson(path: Path, features: list[dict]) -> None:
    doc = {"type": "FeatureCollection", "crs_units": "meters",
           "features": features}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def synthesize_response(zscores: np.ndarray, betas: np.ndarray,
                        noise_sd: float, seed: int,
                        base_density: float) -> np.ndarray:
    """Planted per-district activity densities from z-scored metrics."""
    rng = np.random.default_rng([seed, 0xAC71])
    eps = rng.normal(0.0, noise_sd, size=len(zscores)) if noise_sd > 0 \
        else np.zeros(len(zscores))
    return np.exp(math.log(base_density) + zscores @ betas + eps)


def _closeness(block_centroids: list[tuple[float, float]],
               feature_centroids: list[tuple[float, float]]) -> float:
    if not feature_centroids:
        return 0.0
    total = 0.0
    for bx, by in block_centroids:
        total += min(math.hypot(bx - fx, by - fy) for fx, fy in feature_centroids)
    return 1.0 / (total / len(block_centroids))


def generate_city(spec: SynthSpec, outdir: str | Path) -> SynthResult:
    """Emit the full layer set plus ground truth into ``outdir``."""
    spec.validate()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    s = spec.block_size
    m, n, k = spec.grid_rows, spec.grid_cols, spec.district_k
    width, height = n * s, m * s
    d_rows, d_cols = m // k, n // k
    district_ids = [f"d{R:02d}_{C:02d}" for R in range(d_rows) for C in range(d_cols)]
    n_districts = len(district_ids)

    # --- blocks and districts
    block_feats = []
    blocks_by_district: dict[str, list[tuple[int, int]]] = {d: [] for d in district_ids}
    for r in range(m):
        for c in range(n):
            did = f"d{r // k:02d}_{c // k:02d}"
            bid = f"b{r:03d}_{c:03d}"
            block_feats.append(_polygon_feature(
                _rect_ring(c * s, r * s, (c + 1) * s, (r + 1) * s),
                {"id": bid, "district_id": did}))
            blocks_by_district[did].append((r, c))

    def block_centroids(did: str) -> list[tuple[float, float]]:
        return [((c + 0.5) * s, (r + 0.5) * s) for r, c in blocks_by_district[did]]

    net_area = (k * s) ** 2  # no water or natural parks inside the city

    # --- land use: one class per block, district-specific mix
    landuse_feats = []
    class_counts: dict[str, list[int]] = {}
    classes = ("residential", "work", "green-water")
    for did in district_ids:
        weights = rng.dirichlet([3.0, 2.0, 1.0])
        counts = [0, 0, 0]
        for r, c in blocks_by_district[did]:
            j = int(rng.choice(3, p=weights))
            counts[j] += 1
            landuse_feats.append(_polygon_feature(
                _rect_ring(c * s, r * s, (c + 1) * s, (r + 1) * s),
                {"klass": classes[j]}))
        class_counts[did] = counts

    # --- census, one row per block
    census_rows: dict[str, list[int]] = {}
    district_census: dict[str, dict[str, np.ndarray | int]] = {}
    for did in district_ids:
        pop_factor = rng.uniform(0.5, 2.0)
        emp_factor = rng.uniform(0.3, 3.0)
        age_mix = rng.dirichlet([1.0] * 9)
        floor_mix = rng.dirichlet([2.0, 3.0, 2.0, 1.0])
        apt_mix = rng.dirichlet([2.0, 2.0, 2.0, 1.5, 1.0, 0.5])
        totals = {"P1": 0, "E2": 0, "E3": 0, "ADDETTI": 0,
                  "age": np.zeros(9, dtype=int), "floor": np.zeros(4, dtype=int),
                  "apt": np.zeros(6, dtype=int)}
        for r, c in blocks_by_district[did]:
            p1 = int(round(int(rng.integers(80, 400)) * pop_factor))
            e2 = int(rng.integers(8, 50)) + 1
            e3 = int(rng.integers(0, e2 + 1))
            addetti = max(1, int(round(int(rng.integers(20, 300)) * emp_factor)))
            age = rng.multinomial(e2, age_mix)
            floor = rng.multinomial(e2, floor_mix)
            apt = rng.multinomial(e2, apt_mix)
            census_rows[f"b{r:03d}_{c:03d}"] = (
                [p1, e2, e3] + age.tolist() + floor.tolist() + apt.tolist() + [addetti])
            totals["P1"] += p1
            totals["E2"] += e2
            totals["E3"] += e3
            totals["ADDETTI"] += addetti
            totals["age"] = totals["age"] + age
            totals["floor"] = totals["floor"] + floor
            totals["apt"] = totals["apt"] + apt
        district_census[did] = totals

    # --- streets: full grid plus per-district alley crossings
    street_feats = []
    for r in range(m + 1):
        street_feats.append(_line_feature([[c * s, r * s] for c in range(n + 1)]))
    for c in range(n + 1):
        street_feats.append(_line_feature([[c * s, r * s] for r in range(m + 1)]))
    alley_counts: dict[str, int] = {}
    arm = s * 0.05
    for did in district_ids:
        count = int(rng.integers(0, spec.alley_max + 1))
        alley_counts[did] = count
        centers: list[tuple[float, float]] = []
        attempts = 0
        while len(centers) < count and attempts < 200:
            attempts += 1
            r, c = blocks_by_district[did][int(rng.integers(len(blocks_by_district[did])))]
            x = (c + 0.5) * s + rng.uniform(-0.2 * s, 0.2 * s)
            y = (r + 0.5) * s + rng.uniform(-0.2 * s, 0.2 * s)
            if all(math.hypot(x - px, y - py) > 4 * arm for px, py in centers):
                centers.append((x, y))
        alley_counts[did] = len(centers)
        for x, y in centers:
            street_feats.append(_line_feature([[x - arm, y], [x, y], [x + arm, y]]))
            street_feats.append(_line_feature([[x, y - arm], [x, y], [x, y + arm]]))

    # --- places and companies
    place_feats = []
    place_counts: dict[str, dict[str, int]] = {}
    daily_places: list[tuple[float, float]] = []
    company_employees: dict[str, list[int]] = {}
    place_seq = 0
    for did in district_ids:
        (r0, c0) = blocks_by_district[did][0]
        x0, y0 = c0 * s, r0 * s
        w = h = k * s
        counts = {g: 0 for g in PLACE_GROUP_FLAGS}
        for g in sorted(PLACE_GROUP_FLAGS):
            lam = spec.place_intensity.get(g, 0.0) * rng.uniform(0.3, 2.0)
            counts[g] = int(rng.poisson(lam))
        if sum(counts.values()) == 0:
            counts["Eating-drinking"] = 1
        for g in sorted(PLACE_GROUP_FLAGS):
            for _ in range(counts[g]):
                x = x0 + rng.uniform(0.05 * w, 0.95 * w)
                y = y0 + rng.uniform(0.05 * h, 0.95 * h)
                place_feats.append(_point_feature(x, y, {"id": f"p{place_seq}",
                                                         "group": g}))
                place_seq += 1
                if PLACE_GROUP_FLAGS[g][0]:
                    daily_places.append((x, y))
        place_counts[did] = counts
        n_comp = int(rng.integers(2, 8))
        emps = []
        for _ in range(n_comp):
            x = x0 + rng.uniform(0.05 * w, 0.95 * w)
            y = y0 + rng.uniform(0.05 * h, 0.95 * h)
            e = int(rng.integers(1, 60))
            emps.append(e)
            place_feats.append(_point_feature(x, y, {"id": f"p{place_seq}",
                                                     "group": "Company",
                                                     "employees": e}))
            place_seq += 1
        company_employees[did] = emps

    # --- border vacuums in the margins around the city rectangle
    vacuum_feats = []
    vacuum_centroids: dict[str, list[tuple[float, float]]] = {
        "small_park": [], "large_park": [], "railway": [], "highway": [],
        "water": []}

    def add_rect(kind: str, x0: float, y0: float, x1: float, y1: float,
                 natural: bool = False) -> None:
        idx = len(vacuum_centroids[kind])
        props = {"kind": kind, "id": f"{kind}_{idx}"}
        if natural:
            props["natural"] = True
        vacuum_feats.append(_polygon_feature(_rect_ring(x0, y0, x1, y1), props))
        vacuum_centroids[kind].append(((x0 + x1) / 2.0, (y0 + y1) / 2.0))

    gap = 2.0 * s
    for i in range(2):  # highways: strips along the left margin
        y = rng.uniform(0.0, height * 0.6)
        add_rect("highway", -gap - 8 * s, y, -gap - 7 * s, y + height * 0.4)
    for i in range(3):  # water bodies along the right margin
        y = rng.uniform(-gap, height)
        add_rect("water", width + gap + i * 3 * s, y,
                 width + gap + i * 3 * s + s, y + 2 * s)
    for i in range(2):  # railways along the top margin
        x = rng.uniform(0.0, width * 0.5)
        add_rect("railway", x, height + gap + i * 2 * s,
                 x + width * 0.5, height + gap + i * 2 * s + 0.5 * s)
    for i in range(3):  # large parks below (not flagged natural)
        x = rng.uniform(-gap, width)
        side = 11.0 * s  # >= 1 km² for the default block size
        add_rect("large_park", x, -gap - (i + 1) * 14 * s, x + side,
                 -gap - (i + 1) * 14 * s + side)
    for i in range(6):  # small parks scattered in the side margins
        x = width + gap + rng.uniform(0, 6 * s) if i % 2 else -gap - rng.uniform(s, 6 * s)
        y = rng.uniform(-2 * gap, height + 2 * gap)
        add_rect("small_park", x, y, x + 0.5 * s, y + 0.5 * s)

    # --- ground-truth metrics (independent closed forms)
    gt: dict[str, list[float | None]] = {name: [] for name in METRIC_NAMES}
    ln3 = math.log(3.0)
    for did in district_ids:
        counts = class_counts[did]
        total_blocks = sum(counts)
        lum = 0.0
        for cnt in counts:
            p = cnt / total_blocks
            if p > 0:
                lum -= p * math.log(p)
        gt["lum"].append(lum / ln3)
        res, work = counts[0], counts[1]
        gt["rnr"].append(1.0 - abs(res - work) / (res + work)
                         if res + work > 0 else None)

        bc = block_centroids(did)
        gt["closeness_small_parks"].append(_closeness(bc, vacuum_centroids["small_park"]))
        gt["closeness_large_parks"].append(_closeness(bc, vacuum_centroids["large_park"]))
        gt["closeness_railways"].append(_closeness(bc, vacuum_centroids["railway"]))
        gt["closeness_highways"].append(_closeness(bc, vacuum_centroids["highway"]))
        gt["closeness_water"].append(_closeness(bc, vacuum_centroids["water"]))
        gt["daily"].append(_closeness(bc, daily_places))

        cen = district_census[did]
        floor = cen["floor"]
        gt["housing_types"].append(
            float(sum(c * z for c, z in zip(floor, DEFAULT_FLOOR_VALUES)) / floor.sum()))
        age = np.asarray(cen["age"], dtype=float)
        last = 2011
        old = np.asarray([((last - a) + (last - b)) / 2.0 for a, b in DEFAULT_AGE_BANDS])
        avg_age = float((age * old).sum() / age.sum())
        gt["avg_building_age"].append(avg_age)
        gt["std_building_age"].append(
            float(age.dot(age) / age.sum() ** 2 * age.var()))

        pc = place_counts[did]
        n_places = sum(pc.values())
        nd_count = sum(cnt for g, cnt in pc.items() if not PLACE_GROUP_FLAGS[g][0])
        nl_count = sum(cnt for g, cnt in pc.items() if PLACE_GROUP_FLAGS[g][1])
        tp_count = sum(cnt for g, cnt in pc.items() if PLACE_GROUP_FLAGS[g][2])
        d_count = n_places - nd_count
        gt["commercial"].append(nd_count / n_places)
        gt["nightlife"].append(nl_count / n_places)
        gt["third_places"].append(tp_count / n_places)
        gt["nightlife_density"].append(nl_count / net_area)
        gt["density_daily_places"].append(d_count / net_area)
        gt["density_nondaily_places"].append(nd_count / net_area)

        gt["mean_block_area"].append(s * s)
        gt["intersection_density"].append(((k - 1) ** 2 + alley_counts[did]) / net_area)
        gt["anisotropicity"].append(2.0 / math.pi)

        gt["population_density"].append(cen["P1"] / net_area)
        gt["employment_density"].append(cen["ADDETTI"] / net_area)
        gt["pop_emp_ratio"].append((cen["P1"] / net_area) / (cen["ADDETTI"] / net_area))
        apt = cen["apt"]
        gt["apartments_per_building"].append(
            float(sum(mm * cc for mm, cc in zip(DEFAULT_APARTMENT_MIDPOINTS, apt))
                  / cen["E2"]))
        emps = company_employees[did]
        gt["employees_per_company"].append(sum(emps) / len(emps))

    # --- planted activity densities
    beta_names = sorted(spec.planted_betas)
    z_cols = []
    for name in beta_names:
        vals = gt[name]
        if any(v is None for v in vals):
            raise ConfigError(f"planted metric {name!r} is missing for some district")
        arr = np.asarray(vals, dtype=float)
        if arr.std() == 0.0:
            raise ConfigError(f"planted metric {name!r} is constant; cannot z-score")
        z_cols.append((arr - arr.mean()) / arr.std())
    Z = np.column_stack(z_cols) if z_cols else np.zeros((n_districts, 0))
    betas = np.asarray([spec.planted_betas[name] for name in beta_names])
    densities = synthesize_response(Z, betas, spec.noise_sd, spec.seed,
                                    spec.base_density)
    signal = Z @ betas if len(beta_names) else np.zeros(n_districts)
    signal_variance = float(signal.var())

    # --- stations and the hourly trace that inverts to the planted densities
    # One station per district center first: the centers alone tessellate
    # into the exact district tiles, and extra sites only shrink cells, so
    # every district keeps a private cell and the count solve stays feasible.
    stations = []
    seen = set()
    for did in district_ids:
        if len(stations) >= spec.station_count:
            break
        r0, c0 = blocks_by_district[did][0]
        x, y = (c0 + k / 2.0) * s, (r0 + k / 2.0) * s
        seen.add((x, y))
        stations.append((f"s{len(stations)}", x, y))
    while len(stations) < spec.station_count:
        x = float(rng.uniform(0.01 * width, 0.99 * width))
        y = float(rng.uniform(0.01 * height, 0.99 * height))
        if (x, y) not in seen:
            seen.add((x, y))
            stations.append((f"s{len(stations)}", x, y))

    base_counts = _solve_station_counts(
        spec, stations, district_ids, blocks_by_district, densities,
        net_area, width, height)

    # --- write everything out
    paths = {
        "blocks": outdir / "blocks.geojson",
        "landuse": outdir / "landuse.geojson",
        "vacuums": outdir / "vacuums.geojson",
        "places": outdir / "places.geojson",
        "streets": outdir / "streets.geojson",
        "stations": outdir / "stations.geojson",
        "census": outdir / "census.csv",
        "activity": outdir / "activity.csv",
        "ground_truth": outdir / "ground_truth.csv",
        "model_truth": outdir / "ground_truth_model.json",
        "config": outdir / "pipeline.toml",
    }
    _write_geojson(paths["blocks"], block_feats)
    _write_geojson(paths["landuse"], landuse_feats)
    _write_geojson(paths["vacuums"], vacuum_feats)
    _write_geojson(paths["places"], place_feats)
    _write_geojson(paths["streets"], street_feats)
    _write_geojson(paths["stations"],
                   [_point_feature(x, y, {"id": sid}) for sid, x, y in stations])

    from .model import CENSUS_COLUMNS
    with open(paths["census"], "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CENSUS_COLUMNS) + "\n")
        for bid in sorted(census_rows):
            fh.write(bid + "," + ",".join(str(v) for v in census_rows[bid]) + "\n")

    with open(paths["activity"], "w", encoding="utf-8", newline="") as fh:
        fh.write("station_id,iso_hour,connections\n")
        for day in range(spec.days):
            date = spec.start_date + dt.timedelta(days=day)
            weekend = date.weekday() >= 5
            for hour in range(24):
                profile = 1.0 + 0.2 * math.sin(2.0 * math.pi * hour / 24.0)
                scale = 0.3 if weekend else 1.0
                stamp = dt.datetime.combine(date, dt.time(hour)).isoformat()
                for j, (sid, _, _) in enumerate(stations):
                    count = float(base_counts[j]) * profile * scale
                    fh.write(f"{sid},{stamp},{count!r}\n")

    with open(paths["ground_truth"], "w", encoding="utf-8", newline="") as fh:
        fh.write("district_id," + ",".join(METRIC_NAMES)
                 + ",activity_density,net_area\n")
        for i, did in enumerate(district_ids):
            cells = []
            for name in METRIC_NAMES:
                v = gt[name][i]
                cells.append("" if v is None else repr(float(v)))
            fh.write(did + "," + ",".join(cells)
                     + f",{float(densities[i])!r},{float(net_area)!r}\n")

    with open(paths["model_truth"], "w", encoding="utf-8") as fh:
        json.dump({
            "planted_betas": spec.planted_betas,
            "noise_sd": spec.noise_sd,
            "base_density": spec.base_density,
            "signal_variance": signal_variance,
            "seed": spec.seed,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(paths["config"], "w", encoding="utf-8") as fh:
        fh.write(_pipeline_toml(outdir))

    return SynthResult(outdir, district_ids, gt, densities.tolist(),
                       [net_area] * n_districts, dict(spec.planted_betas),
                       signal_variance, spec.noise_sd, paths)


def _solve_station_counts(spec: SynthSpec, stations, district_ids,
                          blocks_by_district, densities, net_area,
                          width, height) -> np.ndarray:
    """Per-station base counts whose Voronoi aggregation hits the targets.

    Each district's target total is first spread over overlapping cells in
    proportion to intersection area; a district-level linear correction then
    removes the mixing error introduced by cells straddling borders. If the
    corrected counts go negative, a nonnegative least-squares solve in count
    space finds an exact feasible trace instead.
    """
    from shapely.geometry import Polygon as ShapelyPolygon

    from .geometry import voronoi_tessellation

    s = spec.block_size
    boundary = ShapelyPolygon(_rect_ring(0.0, 0.0, width, height)[:-1])
    cells = voronoi_tessellation([(x, y) for _, x, y in stations], boundary)
    targets = np.asarray([d * net_area for d in densities])

    n_d, n_s = len(district_ids), len(stations)
    overlap = np.zeros((n_d, n_s))
    for i, did in enumerate(district_ids):
        (r0, c0) = blocks_by_district[did][0]
        k = spec.district_k
        dpoly = ShapelyPolygon(_rect_ring(c0 * s, r0 * s, (c0 + k) * s,
                                          (r0 + k) * s)[:-1])
        for j, cell in enumerate(cells):
            if cell.intersects(dpoly):
                overlap[i, j] = cell.intersection(dpoly).area

    cell_areas = np.asarray([c.area for c in cells])
    w = overlap / cell_areas  # aggregation weights, no water in synth cities
    u = overlap / net_area  # proportional distribution of district mass
    mix = w @ u.T
    try:
        lam = np.linalg.solve(mix, targets)
    except np.linalg.LinAlgError:
        lam = None
    if lam is not None:
        counts = u.T @ lam
        if counts.min() >= 0.0:
            return counts
    from scipy.optimize import nnls

    counts, resid = nnls(w, targets)
    if resid > 1e-9 * max(float(targets.max()), 1.0):
        raise ConfigError("could not place nonnegative station counts for the "
                          "requested activity densities; add stations")
    return counts


def _pipeline_toml(outdir: Path) -> str:
    return f"""# Auto-generated pipeline configuration for a synthetic city.
[paths]
blocks = "{outdir / 'blocks.geojson'}"
landuse = "{outdir / 'landuse.geojson'}"
vacuums = "{outdir / 'vacuums.geojson'}"
places = "{outdir / 'places.geojson'}"
streets = "{outdir / 'streets.geojson'}"
stations = "{outdir / 'stations.geojson'}"
census = "{outdir / 'census.csv'}"
activity = "{outdir / 'activity.csv'}"

[output]
dir = "{outdir / 'out'}"

[calendar]
holidays = []

[model]
seed = 0
splits = 1000
train_frac = 0.75
stability_subsamples = 200
stability_threshold = 0.6
rfe_keep = 5
transform = "boxcox"
interactions = [["third_places", "closeness_highways"],
                ["closeness_small_parks", "closeness_highways"]]
"""
