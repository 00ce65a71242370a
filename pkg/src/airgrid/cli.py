"""Command-line entry point wiring the full workflow.

Subcommands: gen-synth, build-dataset, train, evaluate, eval-density,
eval-region, predict-map, gradcheck. Logs go to stderr; machine-readable
outputs (CSV, datasets, models, rasters) and figures go to files under
--out. Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import evaluation, mapgen, plots, synth
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericalError
from .features import FeatureBuilder, VARIANTS
from .geo import KernelSpec, Location, SpatialIndex
from .ingest import (
    filter_station_outliers,
    parse_roads,
    parse_sensors,
    parse_stations,
    parse_traffic,
    parse_utc,
)
from .network import ModelConfig, gradient_check, load_model, random_small_config, save_model
from .trainer import TrainConfig, train

log = logging.getLogger("airgrid")

GRADCHECK_TOLERANCE = 1e-4


def _add_common(parser):
    parser.add_argument("--threads", type=int, default=1,
                        help="worker parallelism cap (current implementation runs single-threaded)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numerics (already the default behavior)")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airgrid",
        description="PM2.5/PM10 prediction from stations, low-cost sensors, roads and traffic",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic world with closed-form truth")
    p.add_argument("--out", required=True, help="output directory for the four CSVs and truth parameters")
    p.add_argument("--seed", type=int, default=20190101, help="world seed (default 20190101)")
    p.add_argument("--stations", type=int, default=24, help="number of monitoring stations (default 24)")
    p.add_argument("--sensors", type=int, default=120, help="number of low-cost sensors (default 120)")
    p.add_argument("--roads", type=int, default=120, help="number of road segments (default 120)")
    p.add_argument("--hours", type=int, default=72, help="hours of data from 2019-01-01T00:00Z (default 72)")
    p.add_argument("--bbox", default=None,
                   help="lat_min,lat_max,lon_min,lon_max (default 37,39.7,-123.2,-119.8)")
    p.add_argument("--noise-std", type=float, default=0.2,
                   help="sensor lognormal noise sigma (default 0.2)")
    p.add_argument("--humidity-bias", type=float, default=0.01,
                   help="sensor bias per %%RH above 60 (default 0.01)")
    p.add_argument("--bumps", type=int, default=30, help="static neighborhood terms (default 30)")
    p.add_argument("--events", type=int, default=24, help="transient pollution events (default 24)")
    _add_common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-dataset", help="ingest sources, build datasets, split stations")
    p.add_argument("--config", required=True, help="run config with [data] paths")
    p.add_argument("--variant", default="all", choices=(*VARIANTS, "all"),
                   help="feature variant to build (default all)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--start", default=None, help="first hour, ISO-8601 Z (default: data span)")
    p.add_argument("--end", default=None, help="last hour, ISO-8601 Z (default: data span)")
    _add_common(p)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", default=None, choices=VARIANTS,
                   help="model variant (default: [model] variant from config)")
    p.add_argument("--dataset", required=True, help="dataset .agds file matching the variant")
    p.add_argument("--split", required=True, help="split plan from build-dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics for trained models plus the nearest-station benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--models", required=True, help="comma-separated model files")
    p.add_argument("--dataset-dir", required=True, help="directory with dataset_<variant>.agds files")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("eval-density", help="density-stratified batch analysis")
    p.add_argument("--config", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batches", type=int, default=10, help="number of density batches (default 10)")
    _add_common(p)
    p.set_defaults(func=cmd_eval_density)

    p = sub.add_parser("eval-region", help="metrics restricted to configured regions")
    p.add_argument("--config", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval_region)

    p = sub.add_parser("predict-map", help="render concentration rasters at one hour")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--hour", required=True, help="ISO-8601 hour with Z suffix")
    p.add_argument("--bbox", required=True, help="lat_min,lat_max,lon_min,lon_max")
    p.add_argument("--cell-m", type=float, default=50.0, help="cell size in meters (default 50)")
    p.add_argument("--pollutants", default="pm25,pm10", help="comma-separated subset (default both)")
    p.add_argument("--compare-model", default=None,
                   help="optional second model; adds rasters and a variability comparison")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--configs", type=int, default=20, help="number of random small configs (default 20)")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _parse_bbox(text: str) -> tuple[float, float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad bbox {text!r}: {exc}") from exc
    if len(parts) != 4:
        raise ConfigError(f"bbox needs lat_min,lat_max,lon_min,lon_max, got {text!r}")
    return parts


def _parse_hour(text: str):
    try:
        return parse_utc(text)
    except ValueError as exc:
        raise ConfigError(f"bad hour {text!r}: {exc}") from exc


def _load_sources(cfg: RunConfig):
    stations_path, sensors_path, roads_path, traffic_path = cfg.source_paths()
    stations, rep = parse_stations(stations_path)
    log.info("%s", rep.summary())
    stations.sort(key=lambda r: (r.station_id, r.hour))
    stations, rejected = filter_station_outliers(stations)
    if rejected:
        log.info("outlier filter rejected values in %d records", len(rejected))
    sensors, rep = parse_sensors(sensors_path)
    log.info("%s", rep.summary())
    roads, rep = parse_roads(roads_path)
    log.info("%s", rep.summary())
    traffic, rep = parse_traffic(traffic_path)
    log.info("%s", rep.summary())
    return stations, sensors, roads, traffic


def _station_densities(stations, sensors, density_d_km: float) -> dict[str, float]:
    seen: dict[str, Location] = {}
    for rec in sensors:
        seen.setdefault(rec.sensor_id, rec.location)
    index = SpatialIndex(sorted(seen.items()), cell_km=max(density_d_km, 1.0))
    spec = KernelSpec(density_d_km)
    ones = dict.fromkeys(index.ids, 1.0)
    locs: dict[str, Location] = {}
    for rec in stations:
        locs.setdefault(rec.station_id, rec.location)
    return {sid: index.weighted_sum(loc, spec, ones) for sid, loc in sorted(locs.items())}


def cmd_gen_synth(args) -> int:
    spec_kwargs = dict(
        n_stations=args.stations, n_sensors=args.sensors, n_road_segments=args.roads,
        hours=args.hours, seed=args.seed, sensor_noise_std=args.noise_std,
        humidity_bias_coef=args.humidity_bias, n_bumps=args.bumps, n_events=args.events,
    )
    if args.bbox:
        lat_min, lat_max, lon_min, lon_max = _parse_bbox(args.bbox)
        spec_kwargs.update(lat_min=lat_min, lat_max=lat_max, lon_min=lon_min, lon_max=lon_max)
    try:
        spec = synth.WorldSpec(**spec_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    synth.generate(spec, args.out)
    log.info("synthetic world written to %s", args.out)
    return 0


def cmd_build_dataset(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stations, sensors, roads, traffic = _load_sources(cfg)
    hours = None
    if args.start or args.end:
        if not (args.start and args.end):
            raise ConfigError("--start and --end must be given together")
        hours = (_parse_hour(args.start), _parse_hour(args.end))

    wanted = list(VARIANTS) if args.variant == "all" else [args.variant]
    if wanted == ["station"]:
        produced = {"station": ds_mod.build_dataset(stations, sensors, roads, traffic, "station", hours)}
    else:
        full = ds_mod.build_dataset(stations, sensors, roads, traffic, "station_and_sensor", hours)
        produced = {v: ds_mod.derive_variant(full, v) for v in wanted}
    for variant, dataset in produced.items():
        path = out / f"dataset_{variant}.agds"
        ds_mod.save_dataset(dataset, path)
        log.info("wrote %s (%d points)", path, len(dataset))

    densities = _station_densities(stations, sensors, cfg.density_d_km)
    plan = ds_mod.stratified_split(densities, cfg.split_ratio, cfg.split_seed)
    ds_mod.save_split(plan, out / "split.txt")
    log.info("split: %d train / %d eval stations",
             len(plan.train_station_ids), len(plan.eval_station_ids))
    return 0


def _split_rows(dataset, plan):
    ids = np.array(dataset.station_ids)
    train_ids = set(plan.train_station_ids)
    is_train = np.array([sid in train_ids for sid in ids])
    train_rows = np.nonzero(is_train[dataset.point_station])[0]
    eval_rows = np.nonzero(~is_train[dataset.point_station])[0]
    return train_rows, eval_rows


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    variant = args.variant or cfg.variant
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ds_mod.load_dataset(args.dataset)
    if dataset.variant != variant:
        raise DataError(f"dataset variant {dataset.variant!r} does not match requested {variant!r}")
    plan = ds_mod.load_split(args.split)
    train_rows, eval_rows = _split_rows(dataset, plan)
    if len(train_rows) == 0:
        raise DataError("no training points after applying the split")
    model_config = ModelConfig.for_variant(variant, seed=cfg.model_seed)
    train_config = TrainConfig(
        epochs=args.epochs if args.epochs is not None else cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        shuffle_seed=cfg.shuffle_seed,
        checkpoint_dir=str(out),
        deterministic=cfg.deterministic,
    )
    model, report = train(
        model_config,
        dataset.select(train_rows),
        dataset.select(eval_rows) if len(eval_rows) else None,
        train_config,
    )
    model_path = out / f"model_{variant}.agm"
    save_model(model, model_path)
    (out / "train_report.txt").write_text(report.summary() + "\n", encoding="utf-8")
    log.info("trained %s: %s", model_path, report.epoch_train_msle)
    return 0


def _load_models_and_predictions(args, cfg):
    """Shared evaluate/eval-density/eval-region plumbing: load models, align
    their eval rows, compute predictions and the benchmark."""
    from .network import predict

    plan = ds_mod.load_split(args.split)
    dataset_dir = Path(args.dataset_dir)
    models = {}
    for path_text in args.models.split(","):
        path = Path(path_text)
        model = load_model(path)
        name = path.stem
        if name in models:
            name = f"{name}_{len(models)}"
        models[name] = model

    eval_sets = {}
    reference = None
    for name, model in models.items():
        ds_path = dataset_dir / f"dataset_{model.config.variant}.agds"
        dataset = ds_mod.load_dataset(ds_path)
        _, eval_rows = _split_rows(dataset, plan)
        subset = dataset.select(eval_rows)
        if reference is None:
            reference = subset
        elif (len(subset) != len(reference)
              or (subset.point_hour != reference.point_hour).any()
              or ([subset.station_ids[i] for i in subset.point_station]
                  != [reference.station_ids[i] for i in reference.point_station])):
            raise DataError("evaluation datasets do not align across model variants")
        eval_sets[name] = subset
    if reference is None or len(reference) == 0:
        raise DataError("no evaluation points in the split")

    predictions = {
        name: predict(model, eval_sets[name].windows, eval_sets[name].dense)
        for name, model in models.items()
    }
    stations, _, _, _ = _load_sources(cfg)
    builder = FeatureBuilder(stations, [], [], [])
    benchmark = evaluation.benchmark_predictions(builder, reference)
    return plan, reference, predictions, benchmark


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, reference, predictions, benchmark = _load_models_and_predictions(args, cfg)
    rows = evaluation.head_to_head(predictions, benchmark, reference.targets, reference.masks)
    evaluation.write_metrics_csv(rows, out / "metrics.csv")
    table = evaluation.format_metrics_table(rows)
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    plots.plot_metrics(rows, out / "metrics.png")
    print(table)
    return 0


def cmd_eval_density(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan, reference, predictions, benchmark = _load_models_and_predictions(args, cfg)
    predictions = {"benchmark": benchmark, **predictions}
    densities = np.array([
        plan.densities[reference.station_ids[i]] for i in reference.point_station
    ])
    report = evaluation.density_batches(
        densities, predictions, reference.targets, reference.masks, args.batches
    )
    evaluation.write_density_csv(report, out / "density_batches.csv")
    plots.plot_density_batches(report, out / "density_batches.png")
    log.info("density batches written to %s", out)
    return 0


def cmd_eval_region(args) -> int:
    cfg = load_config(args.config)
    if not cfg.regions:
        raise ConfigError("eval-region needs a [regions] section in the config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan, reference, predictions, benchmark = _load_models_and_predictions(args, cfg)
    import csv as csv_mod

    lines = []
    with open(out / "region_metrics.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv_mod.writer(f)
        writer.writerow(["region", "pollutant", "model", "msle", "mae", "n", "mean_density"])
        for name in sorted(cfg.regions):
            table, mean_density = evaluation.region_metrics(
                reference, cfg.regions[name], predictions, benchmark, plan.densities
            )
            lines.append(f"[{name}] mean sensor density {mean_density:.4f} "
                         f"(evaluation stations only)")
            lines.append(evaluation.format_metrics_table(table))
            for row in table:
                writer.writerow([name, row.pollutant, row.model, repr(row.msle),
                                 repr(row.mae), row.count, repr(mean_density)])
    (out / "region_metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_predict_map(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    stations, sensors, roads, traffic = _load_sources(cfg)
    builder = FeatureBuilder(stations, sensors, roads, traffic, context_scale_km=cfg.context_d_km)
    lat_min, lat_max, lon_min, lon_max = _parse_bbox(args.bbox)
    pollutants = tuple(p.strip() for p in args.pollutants.split(",") if p.strip())
    try:
        spec = mapgen.GridSpec(lat_min, lat_max, lon_min, lon_max,
                               _parse_hour(args.hour), args.cell_m, pollutants)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rasters = mapgen.render(model, builder, spec)
    for pollutant, raster in rasters.items():
        stem = out / f"map_{pollutant}"
        mapgen.write_raster_csv(raster, f"{stem}.csv")
        mapgen.write_raster_asc(raster, f"{stem}.asc")
        mapgen.write_raster_pgm(raster, f"{stem}.pgm")
        plots.plot_raster(raster, f"{stem}.png", title=f"{pollutant} at {args.hour}")
    if args.compare_model:
        other = load_model(args.compare_model)
        other_rasters = mapgen.render(other, builder, spec)
        lines = []
        for pollutant in rasters:
            stem = out / f"map_{pollutant}_compare"
            mapgen.write_raster_csv(other_rasters[pollutant], f"{stem}.csv")
            mapgen.write_raster_asc(other_rasters[pollutant], f"{stem}.asc")
            plots.plot_raster(other_rasters[pollutant], f"{stem}.png")
            stats = mapgen.raster_stats(other_rasters[pollutant], rasters[pollutant])
            lines.append(
                f"{pollutant}: mean {stats.mean_b:.4f} vs {stats.mean_a:.4f}, "
                f"std {stats.std_b:.4f} vs {stats.std_a:.4f}, "
                f"variability ratio {stats.variability_ratio:.4f}"
            )
        (out / "map_stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("rasters written to %s", out)
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i in range(args.configs):
        variant = VARIANTS[i % len(VARIANTS)]
        config = random_small_config(variant, rng)
        err = gradient_check(config, seed=int(rng.integers(0, 2**31)))
        log.info("gradcheck %d/%d %s: %.3e", i + 1, args.configs, variant, err)
        worst = max(worst, err)
    print(f"gradcheck: {args.configs} configs, max relative error {worst:.6e}")
    if worst >= GRADCHECK_TOLERANCE:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return 2
    if args.threads > 1:
        log.info("--threads %d requested; execution is single-threaded, treating as 1", args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
