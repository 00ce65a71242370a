"""Evaluation suite: squared-log-error and absolute-error metrics, the
closest-station benchmark, density-stratified batch analysis, and
region-filtered metrics.

All metrics run over (point, pollutant) pairs where the target is reported;
pairs whose benchmark prediction is missing are dropped from every model's
row in head-to-head comparisons so that all rows share one support set.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from datetime import timezone

from .dataset import Dataset
from .errors import DataError
from .features import FeatureBuilder
from .geo import Location

log = logging.getLogger(__name__)

POLLUTANTS = ("pm25", "pm10")


@dataclass(frozen=True)
class MetricRow:
    pollutant: str
    model: str
    msle: float
    mae: float
    count: int


@dataclass(frozen=True)
class RegionSpec:
    name: str
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if self.lat_min >= self.lat_max or self.lon_min >= self.lon_max:
            raise ValueError(f"region {self.name!r}: bounds not well ordered")

    def contains(self, loc: Location) -> bool:
        return (self.lat_min <= loc.lat <= self.lat_max
                and self.lon_min <= loc.lon <= self.lon_max)


@dataclass
class DensityBatch:
    index: int
    mean_density: float
    count: int
    msle: dict  # model -> {"pm25": x, "pm10": y, "all": z} (NaN when empty)


@dataclass
class DensityBatchReport:
    batches: list[DensityBatch]
    median_density: float
    models: list[str]


def benchmark_predict(
    builder: FeatureBuilder, query: Location, hour: datetime, exclude: str | None = None
) -> tuple[float | None, float | None]:
    """Per pollutant, the measurement of the nearest reporting station after
    exclusion; None when no station reports it."""
    block = builder.station_block(query, hour, exclude)
    pm25 = float(block.pm25_values[0]) if block.pm25_inv_dist[0] > 0 else None
    pm10 = float(block.pm10_values[0]) if block.pm10_inv_dist[0] > 0 else None
    return pm25, pm10


def benchmark_predictions(builder: FeatureBuilder, dataset: Dataset) -> np.ndarray:
    """(n, 2) benchmark concentrations with NaN where unavailable."""
    out = np.full((len(dataset), 2), np.nan)
    for i in range(len(dataset)):
        sid = dataset.station_ids[dataset.point_station[i]]
        loc = dataset.station_locs[dataset.point_station[i]]
        hour = datetime.fromtimestamp(int(dataset.point_hour[i]), tz=timezone.utc)
        pm25, pm10 = benchmark_predict(builder, loc, hour, exclude=sid)
        if pm25 is not None:
            out[i, 0] = pm25
        if pm10 is not None:
            out[i, 1] = pm10
    return out


def pair_metrics(predictions, targets, support) -> tuple[float, float, int]:
    """(MSLE, MAE, count) over the supported pairs of one pollutant column."""
    n = int(support.sum())
    if n == 0:
        return math.nan, math.nan, 0
    p = predictions[support]
    t = targets[support]
    d = np.log1p(p) - np.log1p(t)
    return float((d * d).mean()), float(np.abs(p - t).mean()), n


def compute_metrics(predictions, targets, masks, model: str = "model") -> list[MetricRow]:
    """Per-pollutant MSLE and MAE rows over pairs where both the target and
    the prediction exist. Pollutants with no valid pairs are omitted."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    rows = []
    for j, pollutant in enumerate(POLLUTANTS):
        support = np.asarray(masks[:, j], dtype=bool) & ~np.isnan(predictions[:, j])
        msle, mae, n = pair_metrics(predictions[:, j], targets[:, j], support)
        if n == 0:
            log.warning("compute_metrics: no valid %s pairs for %s, row omitted", pollutant, model)
            continue
        rows.append(MetricRow(pollutant, model, msle, mae, n))
    return rows


def head_to_head(
    predictions_by_model: dict[str, np.ndarray],
    benchmark: np.ndarray,
    targets: np.ndarray,
    masks: np.ndarray,
) -> list[MetricRow]:
    """Metrics table with one row per (pollutant, model) plus benchmark rows,
    all restricted to pairs where the benchmark could predict."""
    rows: list[MetricRow] = []
    targets = np.asarray(targets, dtype=np.float64)
    for j, pollutant in enumerate(POLLUTANTS):
        support = np.asarray(masks[:, j], dtype=bool) & ~np.isnan(benchmark[:, j])
        msle, mae, n = pair_metrics(benchmark[:, j], targets[:, j], support)
        if n == 0:
            log.warning("head_to_head: no %s support, rows omitted", pollutant)
            continue
        rows.append(MetricRow(pollutant, "benchmark", msle, mae, n))
        for name, preds in predictions_by_model.items():
            msle, mae, n = pair_metrics(np.asarray(preds, dtype=np.float64)[:, j], targets[:, j], support)
            rows.append(MetricRow(pollutant, name, msle, mae, n))
    return rows


def density_batches(
    densities: np.ndarray,
    predictions_by_model: dict[str, np.ndarray],
    targets: np.ndarray,
    masks: np.ndarray,
    n_batches: int = 10,
) -> DensityBatchReport:
    """Drop points below the median sensor density, order the rest by
    density, and cut them into ``n_batches`` near-equal batches; per batch
    report the mean density and each model's MSLE."""
    densities = np.asarray(densities, dtype=np.float64)
    median = float(np.median(densities))
    keep = np.nonzero(densities >= median)[0]
    if len(keep) < n_batches:
        raise DataError(
            f"density_batches: only {len(keep)} points at or above the median density"
        )
    keep = keep[np.argsort(densities[keep], kind="stable")]
    targets = np.asarray(targets, dtype=np.float64)
    batches = []
    for b, rows in enumerate(np.array_split(keep, n_batches)):
        entry = DensityBatch(b, float(densities[rows].mean()), len(rows), {})
        for name, preds in predictions_by_model.items():
            preds = np.asarray(preds, dtype=np.float64)
            per = {}
            all_d = []
            for j, pollutant in enumerate(POLLUTANTS):
                support = masks[rows, j] & ~np.isnan(preds[rows, j])
                msle, _, n = pair_metrics(preds[rows, j], targets[rows, j], support)
                per[pollutant] = msle
                if n:
                    d = np.log1p(preds[rows, j][support]) - np.log1p(targets[rows, j][support])
                    all_d.append(d)
            if all_d:
                d = np.concatenate(all_d)
                per["all"] = float((d * d).mean())
            else:
                per["all"] = math.nan
            entry.msle[name] = per
        batches.append(entry)
    return DensityBatchReport(batches, median, sorted(predictions_by_model))


def region_metrics(
    dataset: Dataset,
    region: RegionSpec,
    predictions_by_model: dict[str, np.ndarray],
    benchmark: np.ndarray,
    station_densities: dict[str, float],
) -> tuple[list[MetricRow], float]:
    """Head-to-head metrics restricted to points inside the region, plus the
    mean sensor density over the region's stations."""
    inside = np.array([
        region.contains(dataset.station_locs[s]) for s in dataset.point_station
    ])
    rows = np.nonzero(inside)[0]
    if len(rows) == 0:
        raise DataError(f"region_metrics: no evaluation points in region {region.name!r}")
    station_set = sorted({dataset.station_ids[dataset.point_station[i]] for i in rows})
    mean_density = float(np.mean([station_densities[s] for s in station_set]))
    table = head_to_head(
        {name: np.asarray(p)[rows] for name, p in predictions_by_model.items()},
        benchmark[rows],
        dataset.targets[rows],
        dataset.masks[rows],
    )
    return table, mean_density


# -- report writers ----------------------------------------------------------


def format_metrics_table(rows: list[MetricRow]) -> str:
    header = f"{'pollutant':<10} {'model':<24} {'msle':>10} {'mae':>10} {'n':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.pollutant:<10} {row.model:<24} {row.msle:>10.4f} {row.mae:>10.4f} {row.count:>8d}"
        )
    return "\n".join(lines)


def write_metrics_csv(rows: list[MetricRow], path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["pollutant", "model", "msle", "mae", "n"])
        for row in rows:
            writer.writerow([row.pollutant, row.model, repr(row.msle), repr(row.mae), row.count])


def write_density_csv(report: DensityBatchReport, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["pollutant", "model", "msle", "n", "batch_index", "mean_density"])
        for batch in report.batches:
            for model in report.models:
                per = batch.msle[model]
                for pollutant in (*POLLUTANTS, "all"):
                    writer.writerow([
                        pollutant, model, repr(per[pollutant]), batch.count,
                        batch.index, repr(batch.mean_density),
                    ])
