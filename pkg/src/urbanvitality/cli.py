"""Pipeline orchestrator: ingest -> metrics -> activity -> regress -> report.

Every stage is driven by a TOML config file and is deterministic given the
config plus the seed. Exit codes: 0 success, 1 internal error, 2 input
validation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from shapely.ops import unary_union

from . import activity as activity_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import stats as stats_mod
from . import synth as synth_mod
from .errors import ConfigError, DataError, UrbanVitalityError

LAYER_KEYS = ("blocks", "landuse", "vacuums", "places", "streets",
              "stations", "census", "activity")


@dataclass
class PipelineConfig:
    paths: dict[str, Path]
    output_dir: Path
    holidays: frozenset[dt.date]
    metric_config: metrics_mod.MetricConfig
    classification: dict[str, dict[str, bool]]
    net_exclusions: tuple[str, ...]
    small_park_max_area: float
    model: stats_mod.ModelConfig
    city_filter: tuple[str, ...] | None = None


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)

    raw_paths = doc.get("paths", {})
    paths: dict[str, Path] = {}
    for key in LAYER_KEYS:
        if key in raw_paths:
            paths[key] = Path(raw_paths[key])
    out = Path(doc.get("output", {}).get("dir", "out"))

    holidays = frozenset(
        dt.date.fromisoformat(h) for h in doc.get("calendar", {}).get("holidays", []))

    mx = doc.get("metrics", {})
    metric_config = metrics_mod.MetricConfig(
        reference_year=int(mx.get("reference_year", 2011)),
        age_bands=tuple(tuple(b) for b in mx.get("age_bands",
                                                 metrics_mod.DEFAULT_AGE_BANDS)),
        floor_values=tuple(mx.get("floor_values",
                                  metrics_mod.DEFAULT_FLOOR_VALUES)),
        apartment_midpoints=tuple(mx.get("apartment_midpoints",
                                         metrics_mod.DEFAULT_APARTMENT_MIDPOINTS)),
        age_std_weighted=bool(mx.get("age_std_weighted", False)),
    )
    net_exclusions = tuple(mx.get("net_exclusions",
                                  ("water", "natural_large_park")))
    small_park_max = float(mx.get("small_park_max_area",
                                  model_mod.SMALL_PARK_MAX_AREA))

    classification = {g: dict(flags)
                      for g, flags in doc.get("classification", {}).items()}

    md = doc.get("model", {})
    model = stats_mod.ModelConfig(
        seed=int(md.get("seed", 0)),
        splits=int(md.get("splits", 1000)),
        train_frac=float(md.get("train_frac", 0.75)),
        stability_subsamples=int(md.get("stability_subsamples", 200)),
        stability_threshold=float(md.get("stability_threshold", 0.6)),
        stability_max_active=md.get("stability_max_active"),
        rfe_keep=int(md.get("rfe_keep", 5)),
        transform=str(md.get("transform", "boxcox")),
        interactions=tuple(tuple(pair) for pair in
                           md.get("interactions", stats_mod.DEFAULT_INTERACTIONS)),
    )
    city_filter = tuple(md["city_filter"]) if "city_filter" in md else None

    return PipelineConfig(paths, out, holidays, metric_config, classification,
                          net_exclusions, small_park_max, model, city_filter)


def _require_paths(config: PipelineConfig, keys: tuple[str, ...]) -> None:
    missing = [k for k in keys if k not in config.paths]
    if missing:
        raise ConfigError(f"config missing [paths] entries: {missing}")
    absent = [str(config.paths[k]) for k in keys if not config.paths[k].exists()]
    if absent:
        raise ConfigError(f"input files not found: {absent}")


def _load_city(config: PipelineConfig):
    blocks = model_mod.load_blocks(config.paths["blocks"])
    patches = model_mod.load_landuse(config.paths["landuse"])
    vacuums = model_mod.load_vacuums(config.paths["vacuums"],
                                     config.small_park_max_area)
    vacuums = model_mod.apply_station_buffers(vacuums)
    places, companies = model_mod.load_places(config.paths["places"],
                                              config.classification or None)
    streets = model_mod.load_streets(config.paths["streets"])
    census = model_mod.load_census_table(config.paths["census"])
    districts = model_mod.assemble_districts(blocks, census, vacuums,
                                             config.net_exclusions)
    return districts, blocks, patches, places, companies, vacuums, streets


def cmd_ingest_check(config: PipelineConfig, args) -> int:
    _require_paths(config, ("blocks", "landuse", "vacuums", "places",
                            "streets", "census"))
    districts, blocks, patches, places, companies, vacuums, streets = \
        _load_city(config)
    print(f"blocks: {len(blocks)}")
    print(f"districts: {len(districts)}")
    print(f"landuse patches: {len(patches)}")
    print(f"places: {len(places)} (+ {len(companies)} companies)")
    print(f"vacuum features: {len(vacuums)}")
    print(f"street nodes: {len(streets.nodes)}, segments: {len(streets.segments)}")
    if "stations" in config.paths and config.paths["stations"].exists():
        stations, _ = activity_mod.load_stations(config.paths["stations"])
        print(f"stations: {len(stations)}")
    print("ingest-check: OK")
    return 0


def cmd_metrics(config: PipelineConfig, args) -> int:
    _require_paths(config, ("blocks", "landuse", "vacuums", "places",
                            "streets", "census"))
    districts, blocks, patches, places, companies, vacuums, streets = \
        _load_city(config)
    vectors = metrics_mod.compute_all_features(
        districts, blocks, patches, places, companies, vacuums, streets,
        config.metric_config, jobs=args.jobs)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out = config.output_dir / "features.csv"
    metrics_mod.write_features_csv(vectors, out,
                                   config.output_dir / "features_flags.csv")
    print(f"wrote {out} ({len(vectors)} districts)")
    return 0


def cmd_activity(config: PipelineConfig, args) -> int:
    _require_paths(config, ("blocks", "vacuums", "census", "stations",
                            "activity"))
    blocks = model_mod.load_blocks(config.paths["blocks"])
    vacuums = model_mod.load_vacuums(config.paths["vacuums"],
                                     config.small_park_max_area)
    vacuums = model_mod.apply_station_buffers(vacuums)
    census = model_mod.load_census_table(config.paths["census"])
    districts = model_mod.assemble_districts(blocks, census, vacuums,
                                             config.net_exclusions)
    stations, alias = activity_mod.load_stations(config.paths["stations"])
    records = activity_mod.load_activity_csv(config.paths["activity"], alias)
    boundary = unary_union([d.polygon for d in districts])
    cells = activity_mod.build_cell_coverage(stations, boundary, vacuums)
    calendar = activity_mod.BusinessCalendar(config.holidays)
    rows = activity_mod.compute_activity_densities(districts, cells, records,
                                                   calendar)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out = config.output_dir / "activity_density.csv"
    activity_mod.write_density_csv(rows, out)
    print(f"wrote {out} ({len(rows)} districts)")
    return 0


def _merged_table(config: PipelineConfig):
    features_path = config.output_dir / "features.csv"
    density_path = config.output_dir / "activity_density.csv"
    for p in (features_path, density_path):
        if not p.exists():
            raise ConfigError(f"missing pipeline output {p}; "
                              "run the metrics and activity stages first")
    ids, columns = metrics_mod.read_features_csv(features_path)
    densities = activity_mod.read_density_csv(density_path)
    columns["activity_density"] = [
        densities.get(d, (None, 0))[0] for d in ids]
    return ids, columns


def cmd_regress(config: PipelineConfig, args) -> int:
    ids, columns = _merged_table(config)
    model = config.model
    if args.splits is not None:
        model = stats_mod.ModelConfig(**{**model.__dict__, "splits": args.splits})
    if args.seed is not None:
        model = stats_mod.ModelConfig(**{**model.__dict__, "seed": args.seed})
    reports = stats_mod.run_model_suite(ids, columns, model,
                                        include_ids=config.city_filter)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    stats_mod.write_model_report(reports,
                                 config.output_dir / "model_report.json",
                                 config.output_dir / "model_report.csv")
    if args.cv_trace:
        with open(config.output_dir / "cv_trace.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "split", "test_r2"])
            for name, rep in reports.items():
                if rep.cv_scores is None:
                    continue
                for i, score in enumerate(rep.cv_scores):
                    writer.writerow([name, i, repr(float(score))])
    unavailable = [n for n, r in reports.items() if not r.available]
    for name in unavailable:
        print(f"warning: model {name!r} unavailable: {reports[name].note}",
              file=sys.stderr)
    print(f"wrote {config.output_dir / 'model_report.json'}")
    return 0


def cmd_report(config: PipelineConfig, args) -> int:
    path = config.output_dir / "model_report.json"
    if not path.exists():
        raise ConfigError(f"missing {path}; run the regress stage first")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    order = ["land_use", "small_blocks", "aged_buildings", "concentration",
             "vacuums", "combined"]
    for name in order:
        rep = doc.get(name)
        if rep is None:
            continue
        print(f"== {name} ==")
        if not rep["available"]:
            print(f"  unavailable: {rep['note']}")
            continue
        print(f"  n={rep['n']}  adj R2={rep['adj_r2_insample']:.4f}  "
              f"CV R2={rep['cv_mean_r2']:.4f} (sd {rep['cv_sd_r2']:.4f})")
        for row in rep["features"]:
            print(f"  {row['feature']:<32} {row['beta']: .4f}{row['stars']}")
    return 0


def cmd_synth(args) -> int:
    spec_doc = {}
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise ConfigError(f"synth spec not found: {spec_path}")
        with open(spec_path, "rb") as fh:
            spec_doc = tomllib.load(fh)
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    known = {f for f in synth_mod.SynthSpec.__dataclass_fields__}
    unknown = [k for k in spec_doc if k not in known]
    if unknown:
        raise ConfigError(f"unknown synth spec keys: {unknown}")
    if "start_date" in spec_doc and isinstance(spec_doc["start_date"], str):
        spec_doc["start_date"] = dt.date.fromisoformat(spec_doc["start_date"])
    spec = synth_mod.SynthSpec(**spec_doc)
    result = synth_mod.generate_city(spec, args.out)
    print(f"wrote synthetic city to {result.outdir} "
          f"({len(result.district_ids)} districts)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanvitality",
        description="Urban-diversity metrics and activity-density analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic city dataset")
    p_synth.add_argument("--spec", help="TOML synth spec file")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=None)

    for name, helptext in [
        ("ingest-check", "validate all configured input layers"),
        ("metrics", "compute per-district diversity metrics"),
        ("activity", "compute per-district activity density"),
        ("regress", "fit the six regression models"),
        ("report", "print the fitted model report"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="pipeline TOML config")
        p.add_argument("--jobs", type=int, default=1)
        if name == "regress":
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--splits", type=int, default=None)
            p.add_argument("--cv-trace", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        config = load_config(args.config)
        handlers = {
            "ingest-check": cmd_ingest_check,
            "metrics": cmd_metrics,
            "activity": cmd_activity,
            "regress": cmd_regress,
            "report": cmd_report,
        }
        return handlers[args.command](config, args)
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UrbanVitalityError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
