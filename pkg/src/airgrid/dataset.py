"""Supervised dataset assembly, density-stratified splitting, normalization,
and persistence.

One data point per (station, hour) with at least one reported pollutant; the
point's features are built with the station itself excluded, so the value the
model learns to predict never leaks into its inputs.

The on-disk container is a text header (magic AGDS, version, variant, feature
widths, point count, station table, hour base) followed by fixed-width
little-endian binary rows: station index u32, hour offset u32, float32
features, float32 target pair, and two mask bytes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import (
    DENSE_WIDTH,
    FLAG_COUNT,
    FeatureBuilder,
    FeatureVector,
    N_CHANNELS,
    N_NEIGHBORS,
    VARIANTS,
    WINDOW_LEN,
    WINDOW_SIZE,
)
from .geo import Location
from .ingest import RoadSegment, SensorRecord, StationRecord, TrafficObservation

log = logging.getLogger(__name__)

MAGIC = "AGDS"
FORMAT_VERSION = 1
STD_FLOOR = 1e-8

# Dense slots holding concentration measurements (log1p + NA-capable).
MEAS_SLOTS = {"station": 10, "sensor": 0, "station_and_sensor": 10}
# Window channels holding concentrations (log1p before z-scoring).
PM_CHANNELS = (0, 1)


@dataclass(frozen=True)
class Target:
    pm25: float | None
    pm10: float | None

    @property
    def mask(self) -> tuple[bool, bool]:
        return (self.pm25 is not None, self.pm10 is not None)


@dataclass(frozen=True)
class DataPoint:
    station_id: str
    location: Location
    hour: datetime
    features: FeatureVector
    target: Target


class Dataset:
    """Columnar store of data points for one feature variant."""

    def __init__(self, variant, station_ids, station_locs, point_station,
                 point_hour, windows, dense, targets, masks):
        self.variant = variant
        self.station_ids = list(station_ids)
        self.station_locs = list(station_locs)
        self.point_station = point_station  # (n,) int32 into the table
        self.point_hour = point_hour  # (n,) int64 epoch seconds
        self.windows = windows  # (n, 5, 16, 4) float32 or None
        self.dense = dense  # (n, N2) float32, NaN for missing measurements
        self.targets = targets  # (n, 2) float32, NaN for NA
        self.masks = masks  # (n, 2) bool

    def __len__(self) -> int:
        return len(self.point_station)

    def point(self, i: int) -> DataPoint:
        sid = self.station_ids[self.point_station[i]]
        hour = datetime.fromtimestamp(int(self.point_hour[i]), tz=timezone.utc)
        windows = None if self.windows is None else self.windows[i].astype(np.float64)
        fv = FeatureVector(self.variant, windows, self.dense[i].astype(np.float64))
        t25 = float(self.targets[i, 0]) if self.masks[i, 0] else None
        t10 = float(self.targets[i, 1]) if self.masks[i, 1] else None
        return DataPoint(sid, self.station_locs[self.point_station[i]], hour, fv, Target(t25, t10))

    def select(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            self.variant, self.station_ids, self.station_locs,
            self.point_station[rows], self.point_hour[rows],
            None if self.windows is None else self.windows[rows],
            self.dense[rows], self.targets[rows], self.masks[rows],
        )


def build_dataset(
    stations: list[StationRecord],
    sensors: list[SensorRecord],
    roads: list[RoadSegment],
    traffic: list[TrafficObservation],
    variant: str,
    hours: tuple[datetime, datetime] | None = None,
) -> Dataset:
    """One data point per station-hour with a reported value, features built
    with self-exclusion, ordered by (station_id, hour)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not stations:
        log.warning("build_dataset: no station records, dataset is empty")
    builder = FeatureBuilder(stations, sensors, roads, traffic)

    by_station: dict[str, list[StationRecord]] = {}
    locs: dict[str, Location] = {}
    for rec in stations:
        if hours is not None and not (hours[0] <= rec.hour <= hours[1]):
            continue
        by_station.setdefault(rec.station_id, []).append(rec)
        locs.setdefault(rec.station_id, rec.location)

    station_ids = sorted(by_station)
    station_locs = [locs[s] for s in station_ids]
    has_windows = variant != "station"
    n2 = DENSE_WIDTH[variant]

    rows_station, rows_hour = [], []
    windows_buf, dense_buf, target_buf, mask_buf = [], [], [], []
    for si, sid in enumerate(station_ids):
        recs = sorted(by_station[sid], key=lambda r: r.hour)
        for rec in recs:
            if rec.pm25 is None and rec.pm10 is None:
                continue
            fv = builder.build(rec.location, rec.hour, variant, exclude=sid)
            rows_station.append(si)
            rows_hour.append(int(rec.hour.timestamp()))
            if has_windows:
                windows_buf.append(fv.windows.astype(np.float32))
            dense_buf.append(fv.dense.astype(np.float32))
            target_buf.append(
                (np.nan if rec.pm25 is None else rec.pm25,
                 np.nan if rec.pm10 is None else rec.pm10)
            )
            mask_buf.append((rec.pm25 is not None, rec.pm10 is not None))

    n = len(rows_station)
    return Dataset(
        variant,
        station_ids,
        station_locs,
        np.array(rows_station, dtype=np.int32),
        np.array(rows_hour, dtype=np.int64),
        np.array(windows_buf, dtype=np.float32).reshape(n, N_NEIGHBORS, WINDOW_LEN, N_CHANNELS) if has_windows else None,
        np.array(dense_buf, dtype=np.float32).reshape(n, n2),
        np.array(target_buf, dtype=np.float32).reshape(n, 2),
        np.array(mask_buf, dtype=bool).reshape(n, 2),
    )


# The station_and_sensor layout is a superset of the other two: station
# variant keeps the station measurements/inverse-distances plus context,
# sensor variant keeps the sensor inverse-distances plus context.
_STATION_COLS = list(range(0, 20)) + [30, 31, 32]
_SENSOR_COLS = list(range(20, 33))


def derive_variant(dataset: Dataset, variant: str) -> Dataset:
    """Slice a station_and_sensor dataset down to a narrower variant without
    re-running feature construction."""
    if dataset.variant != "station_and_sensor":
        raise ValueError("derive_variant needs a station_and_sensor dataset")
    if variant == "station_and_sensor":
        return dataset
    if variant == "station":
        cols, windows = _STATION_COLS, None
    elif variant == "sensor":
        cols, windows = _SENSOR_COLS, dataset.windows
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return Dataset(
        variant, dataset.station_ids, dataset.station_locs,
        dataset.point_station, dataset.point_hour, windows,
        np.ascontiguousarray(dataset.dense[:, cols]),
        dataset.targets, dataset.masks,
    )


# -- stratified split -------------------------------------------------------

N_DECILES = 10


@dataclass
class SplitPlan:
    train_station_ids: list[str]
    eval_station_ids: list[str]
    decile_counts: list[tuple[int, int]]  # (train, eval) per decile
    seed: int
    ratio: float
    densities: dict[str, float]

    def role(self, station_id: str) -> str:
        return "train" if station_id in set(self.train_station_ids) else "eval"


def stratified_split(densities: dict[str, float], ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """80/20 station split drawn independently within each density decile.

    Stations are ranked by sensor density, cut into 10 equal-count deciles
    (remainder spread over the lowest deciles), and shuffled per decile with
    a seeded generator. Below 10 stations this falls back to a plain seeded
    split with a warning.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1): {ratio}")
    ranked = sorted(densities, key=lambda s: (densities[s], s))
    n = len(ranked)
    rng = np.random.default_rng(seed)
    if n < N_DECILES:
        log.warning("stratified_split: only %d stations, falling back to a plain split", n)
        deciles = [ranked]
    else:
        base, rem = divmod(n, N_DECILES)
        deciles = []
        pos = 0
        for d in range(N_DECILES):
            size = base + (1 if d < rem else 0)
            deciles.append(ranked[pos : pos + size])
            pos += size
    train, eval_, counts = [], [], []
    for group in deciles:
        order = rng.permutation(len(group))
        n_train = int(math.floor(ratio * len(group) + 0.5))
        chosen = {group[i] for i in order[:n_train]}
        train += [s for s in group if s in chosen]
        eval_ += [s for s in group if s not in chosen]
        counts.append((n_train, len(group) - n_train))
    return SplitPlan(train, eval_, counts, seed, ratio, dict(densities))


def save_split(plan: SplitPlan, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"seed {plan.seed}\n")
        f.write(f"ratio {plan.ratio!r}\n")
        f.write(f"deciles {' '.join(f'{t}/{e}' for t, e in plan.decile_counts)}\n")
        for sid in sorted(plan.densities):
            f.write(f"station {sid} {plan.role(sid)} {plan.densities[sid]!r}\n")


def load_split(path) -> SplitPlan:
    train, eval_, densities = [], [], {}
    seed, ratio, counts = 0, 0.8, []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read split plan {path}: {exc}") from exc
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "ratio":
            ratio = float(parts[1])
        elif parts[0] == "deciles":
            counts = [tuple(int(v) for v in p.split("/")) for p in parts[1:]]
        elif parts[0] == "station":
            sid, role, dens = parts[1], parts[2], float(parts[3])
            densities[sid] = dens
            (train if role == "train" else eval_).append(sid)
    return SplitPlan(train, eval_, counts, seed, ratio, densities)


# -- normalization ----------------------------------------------------------


@dataclass
class NormStats:
    """Per-feature training statistics.

    Dense slots are z-scored individually; station measurement slots go
    through log1p first and missing entries are excluded from the statistics.
    Window channels are z-scored per channel (shared across sensors and time
    steps, preserving the shared-weight branch symmetry), with log1p applied
    to the two concentration channels. Population standard deviations, with
    anything below 1e-8 clamped to 1.
    """

    variant: str
    dense_mean: np.ndarray
    dense_std: np.ndarray
    window_mean: np.ndarray
    window_std: np.ndarray

    @property
    def n_flags(self) -> int:
        return FLAG_COUNT[self.variant]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.dense_mean, self.dense_std, self.window_mean, self.window_std):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def fit_normalization(dataset: Dataset, rows: np.ndarray | None = None) -> NormStats:
    """Fit per-feature statistics on (a subset of) a dataset."""
    dense = dataset.dense if rows is None else dataset.dense[rows]
    if len(dense) == 0:
        raise DataError("fit_normalization: empty training set")
    n_meas = MEAS_SLOTS[dataset.variant]
    n2 = dense.shape[1]
    dense_mean = np.zeros(n2)
    dense_std = np.ones(n2)
    work = dense.astype(np.float64)
    work[:, :n_meas] = np.log1p(work[:, :n_meas])
    for j in range(n2):
        col = work[:, j]
        valid = col[~np.isnan(col)]
        if len(valid) == 0:
            continue
        dense_mean[j] = valid.mean()
        std = valid.std()
        dense_std[j] = std if std >= STD_FLOOR else 1.0

    if dataset.variant == "station":
        window_mean = np.zeros(0)
        window_std = np.zeros(0)
    else:
        win = (dataset.windows if rows is None else dataset.windows[rows]).astype(np.float64)
        win = win.reshape(-1, N_CHANNELS).copy()
        win[:, list(PM_CHANNELS)] = np.log1p(win[:, list(PM_CHANNELS)])
        window_mean = win.mean(axis=0)
        std = win.std(axis=0)
        window_std = np.where(std >= STD_FLOOR, std, 1.0)
    return NormStats(dataset.variant, dense_mean, dense_std, window_mean, window_std)


def normalize_dense(dense: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score a (n, N2) raw dense block and append presence flags.

    Missing measurements normalize to 0 with their presence flag at 0.
    """
    n_meas = MEAS_SLOTS[stats.variant]
    work = dense.astype(np.float64)
    if n_meas:
        work[:, :n_meas] = np.log1p(work[:, :n_meas])
    z = (work - stats.dense_mean) / stats.dense_std
    if n_meas:
        flags = ~np.isnan(dense[:, :n_meas])
        z[:, :n_meas] = np.where(flags, z[:, :n_meas], 0.0)
        z = np.concatenate([z, flags.astype(np.float64)], axis=1)
    return z


def normalize_windows(windows: np.ndarray, stats: NormStats) -> np.ndarray:
    work = windows.astype(np.float64).copy()
    work[..., list(PM_CHANNELS)] = np.log1p(work[..., list(PM_CHANNELS)])
    return (work - stats.window_mean) / stats.window_std


def invert_dense(z: np.ndarray, stats: NormStats) -> np.ndarray:
    """Undo normalize_dense on the first N2 columns (flags ignored).

    Missing slots come back as the slot mean's inverse; callers mask them.
    """
    n2 = len(stats.dense_mean)
    raw = z[:, :n2] * stats.dense_std + stats.dense_mean
    n_meas = MEAS_SLOTS[stats.variant]
    if n_meas:
        raw[:, :n_meas] = np.expm1(raw[:, :n_meas])
    return raw


def invert_windows(z: np.ndarray, stats: NormStats) -> np.ndarray:
    raw = z * stats.window_std + stats.window_mean
    raw[..., list(PM_CHANNELS)] = np.expm1(raw[..., list(PM_CHANNELS)])
    return raw


def save_norm_stats(stats: NormStats, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"variant {stats.variant}\n")
        for name in ("dense_mean", "dense_std", "window_mean", "window_std"):
            values = " ".join(repr(float(v)) for v in getattr(stats, name))
            f.write(f"{name} {values}\n")


def load_norm_stats(path) -> NormStats:
    fields: dict[str, object] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read norm stats {path}: {exc}") from exc
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "variant":
            fields["variant"] = parts[1]
        else:
            fields[parts[0]] = np.array([float(v) for v in parts[1:]])
    return NormStats(**fields)


# -- persistence ------------------------------------------------------------


def _row_dtype(n1: int, n2: int) -> np.dtype:
    return np.dtype([
        ("station", "<u4"),
        ("hour", "<u4"),
        ("feat", "<f4", (n1 + n2,)),
        ("target", "<f4", (2,)),
        ("mask", "u1", (2,)),
    ])


def save_dataset(dataset: Dataset, path):
    n1 = 0 if dataset.windows is None else WINDOW_SIZE
    n2 = dataset.dense.shape[1]
    n = len(dataset)
    hour_base = int(dataset.point_hour.min()) if n else 0
    header = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"variant {dataset.variant}",
        f"n1 {n1}",
        f"n2 {n2}",
        f"count {n}",
        f"hour_base {hour_base}",
        f"stations {len(dataset.station_ids)}",
    ]
    for sid, loc in zip(dataset.station_ids, dataset.station_locs):
        header.append(f"{sid} {loc.lat!r} {loc.lon!r}")
    header.append("end_header")
    rows = np.zeros(n, dtype=_row_dtype(n1, n2))
    rows["station"] = dataset.point_station
    rows["hour"] = (dataset.point_hour - hour_base) // 3600
    if n1:
        rows["feat"][:, :n1] = dataset.windows.reshape(n, n1)
        rows["feat"][:, n1:] = dataset.dense
    else:
        rows["feat"] = dataset.dense
    rows["target"] = dataset.targets
    rows["mask"] = dataset.masks.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        f.write(rows.tobytes())


def load_dataset(path) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    marker = b"end_header\n"
    split_at = blob.find(marker)
    if split_at < 0 or not blob.startswith(MAGIC.encode()):
        raise DataError(f"{path}: not a {MAGIC} dataset container")
    lines = blob[:split_at].decode("utf-8").splitlines()
    meta = {}
    station_ids, station_locs = [], []
    for line in lines[1:]:
        key, *rest = line.split()
        if key in ("variant", "n1", "n2", "count", "hour_base", "stations"):
            meta[key] = rest[0]
        else:
            station_ids.append(key)
            station_locs.append(Location(float(rest[0]), float(rest[1])))
    variant = meta["variant"]
    n1, n2 = int(meta["n1"]), int(meta["n2"])
    count = int(meta["count"])
    hour_base = int(meta["hour_base"])
    if variant not in VARIANTS or n2 != DENSE_WIDTH[variant]:
        raise DataError(f"{path}: inconsistent variant/width {variant}/{n2}")
    rows = np.frombuffer(blob[split_at + len(marker):], dtype=_row_dtype(n1, n2), count=count)
    windows = None
    if n1:
        windows = rows["feat"][:, :n1].reshape(count, N_NEIGHBORS, WINDOW_LEN, N_CHANNELS).copy()
    dense = rows["feat"][:, n1:].copy()
    return Dataset(
        variant,
        station_ids,
        station_locs,
        rows["station"].astype(np.int32),
        rows["hour"].astype(np.int64) * 3600 + hour_base,
        windows,
        dense,
        rows["target"].copy(),
        rows["mask"].astype(bool),
    )
