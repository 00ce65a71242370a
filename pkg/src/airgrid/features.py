"""Feature construction for any (location, hour) query.

Three blocks feed the prediction models:

  * station block: per pollutant, the measurements of the 5 nearest stations
    that report that pollutant, plus inverse distances (1/km, capped at 100);
  * sensor window block: for the 5 nearest low-cost sensors, the 16 most
    recent measurements within a 4 hour lookback across 4 channels
    (pm25, pm10, temperature, humidity), oldest first;
  * context block: kernel-weighted road length, major-road length and
    jam*length*class traffic emission proxy at a 100 m scale.

Dense feature layout per variant (NaN marks a missing station measurement):

  station (23):            [st_pm25 x5, st_pm10 x5, inv25 x5, inv10 x5,
                            roads, major_roads, traffic]
  sensor (13):             [sensor_inv x5 (pm25 copy), sensor_inv x5 (pm10
                            copy), roads, major_roads, traffic]
  station_and_sensor (33): station measurements and inverse distances, then
                            the duplicated sensor inverse distances, then the
                            three context values.

Feature construction is a pure function of the source records: identical
inputs produce bit-identical vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .geo import KernelSpec, Location, distances_km
from .ingest import MAJOR_ROADS, RoadSegment, SensorRecord, StationRecord, TrafficObservation

N_NEIGHBORS = 5
WINDOW_LEN = 16
N_CHANNELS = 4  # pm25, pm10, temperature, humidity
LOOKBACK_HOURS = 4
CONTEXT_SCALE_KM = 0.1
INV_DISTANCE_CAP = 100.0  # 1/km, reached below 10 m

VARIANTS = ("station", "sensor", "station_and_sensor")

# Dense feature counts per variant and the number of station-measurement
# slots that carry a presence flag after normalization.
DENSE_WIDTH = {"station": 23, "sensor": 13, "station_and_sensor": 33}
FLAG_COUNT = {"station": 10, "sensor": 0, "station_and_sensor": 10}
WINDOW_SIZE = N_NEIGHBORS * WINDOW_LEN * N_CHANNELS  # 320 when present


@dataclass
class StationFeatures:
    pm25_values: np.ndarray  # (5,) NaN-capable
    pm25_inv_dist: np.ndarray  # (5,) zero when padded
    pm10_values: np.ndarray
    pm10_inv_dist: np.ndarray


@dataclass
class SensorWindowFeatures:
    windows: np.ndarray  # (5, 16, 4) oldest first, zeros when padded
    inv_dist: np.ndarray  # (5,) zero when padded


@dataclass
class ContextFeatures:
    roads_weighted_km: float
    major_roads_weighted_km: float
    traffic_weighted: float


@dataclass
class FeatureVector:
    variant: str
    windows: np.ndarray | None  # (5, 16, 4), None for the station variant
    dense: np.ndarray  # (DENSE_WIDTH[variant],)


def _inv_distance(km: float) -> float:
    return 1.0 / max(km, 1.0 / INV_DISTANCE_CAP)


def _epoch(dt: datetime) -> int:
    return int(dt.timestamp())


class FeatureBuilder:
    """Prebuilt indexes over the ingested sources, with per-query caches.

    Immutable once constructed; build() is deterministic, so feature vectors
    for distinct points may be computed concurrently.
    """

    def __init__(
        self,
        stations: list[StationRecord],
        sensors: list[SensorRecord],
        roads: list[RoadSegment],
        traffic: list[TrafficObservation],
        context_scale_km: float = CONTEXT_SCALE_KM,
    ):
        # Stations: id-sorted location table plus per-hour value columns.
        st_locs: dict[str, Location] = {}
        for rec in stations:
            st_locs.setdefault(rec.station_id, rec.location)
        self.station_ids = sorted(st_locs)
        self._st_rank = {sid: i for i, sid in enumerate(self.station_ids)}
        self._st_lats = np.array([st_locs[s].lat for s in self.station_ids])
        self._st_lons = np.array([st_locs[s].lon for s in self.station_ids])
        n_st = len(self.station_ids)
        self._st_values: dict[int, np.ndarray] = {}
        for rec in stations:
            cols = self._st_values.setdefault(
                _epoch(rec.hour), np.full((2, n_st), np.nan)
            )
            i = self._st_rank[rec.station_id]
            if rec.pm25 is not None:
                cols[0, i] = rec.pm25
            if rec.pm10 is not None:
                cols[1, i] = rec.pm10

        # Sensors: id-sorted location table and time-sorted channel arrays.
        se_locs: dict[str, Location] = {}
        for rec in sensors:
            se_locs.setdefault(rec.sensor_id, rec.location)
        self.sensor_ids = sorted(se_locs)
        se_rank = {sid: i for i, sid in enumerate(self.sensor_ids)}
        self._se_lats = np.array([se_locs[s].lat for s in self.sensor_ids])
        self._se_lons = np.array([se_locs[s].lon for s in self.sensor_ids])
        per_sensor: list[list[tuple]] = [[] for _ in self.sensor_ids]
        for rec in sensors:
            per_sensor[se_rank[rec.sensor_id]].append(
                (
                    _epoch(rec.timestamp),
                    np.nan if rec.pm25 is None else rec.pm25,
                    np.nan if rec.pm10 is None else rec.pm10,
                    np.nan if rec.temperature is None else rec.temperature,
                    np.nan if rec.humidity is None else rec.humidity,
                )
            )
        self._se_ts: list[np.ndarray] = []
        self._se_channels: list[np.ndarray] = []
        for rows in per_sensor:
            rows.sort(key=lambda r: r[0])
            arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
            self._se_ts.append(arr[:, 0].astype(np.int64))
            self._se_channels.append(np.ascontiguousarray(arr[:, 1:5]))

        # Roads and hourly jam factors.
        self._road_ids = [r.segment_id for r in roads]
        road_rank = {rid: i for i, rid in enumerate(self._road_ids)}
        self._road_lats = np.array([r.midpoint.lat for r in roads])
        self._road_lons = np.array([r.midpoint.lon for r in roads])
        self._road_len = np.array([r.length_km for r in roads])
        self._road_cls = np.array([float(r.functional_class) for r in roads])
        self._road_major = np.array([r.category == MAJOR_ROADS for r in roads], dtype=bool)
        self._jam: dict[int, np.ndarray] = {}
        for obs in traffic:
            jam = self._jam.setdefault(_epoch(obs.hour), np.zeros(len(roads)))
            idx = road_rank.get(obs.segment_id)
            if idx is not None:
                jam[idx] = obs.jam_factor
        self._context_scale = context_scale_km
        self._no_jam = np.zeros(len(roads))

        self._station_order_cache: dict[tuple[float, float], tuple[np.ndarray, np.ndarray]] = {}
        self._sensor_pick_cache: dict[tuple[float, float], tuple[np.ndarray, np.ndarray]] = {}
        self._context_cache: dict[tuple[float, float], tuple[float, float, np.ndarray, np.ndarray]] = {}

    def covers(self, hour: datetime) -> bool:
        """Whether any source carries data usable at this hour."""
        epoch = _epoch(hour)
        if epoch in self._st_values or epoch in self._jam:
            return True
        lo = epoch - LOOKBACK_HOURS * 3600
        return any(
            len(ts) and ts[-1] > lo and ts[0] <= epoch for ts in self._se_ts
        )

    # -- station block -----------------------------------------------------

    def _station_order(self, query: Location):
        key = (query.lat, query.lon)
        hit = self._station_order_cache.get(key)
        if hit is None:
            d = distances_km(query.lat, query.lon, self._st_lats, self._st_lons)
            order = np.lexsort((np.arange(len(d)), d))
            hit = (order, d)
            self._station_order_cache[key] = hit
        return hit

    def station_block(self, query: Location, hour: datetime, exclude: str | None = None) -> StationFeatures:
        """Per pollutant, the 5 nearest stations reporting it at ``hour``.

        ``exclude`` removes the target station itself so that the value the
        model is trained to predict never appears among its own features.
        Slots beyond the available stations are padded with (NaN, 0).
        """
        cols = self._st_values.get(_epoch(hour))
        order, dist = self._station_order(query)
        out = []
        for p in range(2):
            values = np.full(N_NEIGHBORS, np.nan)
            inv = np.zeros(N_NEIGHBORS)
            slot = 0
            if cols is not None:
                row = cols[p]
                for idx in order:
                    if slot == N_NEIGHBORS:
                        break
                    if exclude is not None and self.station_ids[idx] == exclude:
                        continue
                    v = row[idx]
                    if math.isnan(v):
                        continue
                    values[slot] = v
                    inv[slot] = _inv_distance(dist[idx])
                    slot += 1
            out.append((values, inv))
        return StationFeatures(out[0][0], out[0][1], out[1][0], out[1][1])

    # -- sensor block ------------------------------------------------------

    def _sensor_pick(self, query: Location):
        key = (query.lat, query.lon)
        hit = self._sensor_pick_cache.get(key)
        if hit is None:
            d = distances_km(query.lat, query.lon, self._se_lats, self._se_lons)
            order = np.lexsort((np.arange(len(d)), d))[:N_NEIGHBORS]
            hit = (order, d[order])
            self._sensor_pick_cache[key] = hit
        return hit

    def _window(self, sensor_idx: int, hour_epoch: int) -> np.ndarray | None:
        """(16, 4) window ending at the hour, or None when no records."""
        ts = self._se_ts[sensor_idx]
        hi = np.searchsorted(ts, hour_epoch, side="right")
        lo = np.searchsorted(ts, hour_epoch - LOOKBACK_HOURS * 3600, side="right")
        if hi <= lo:
            return None
        rows = self._se_channels[sensor_idx][max(lo, hi - WINDOW_LEN) : hi]
        m = len(rows)
        if m < WINDOW_LEN:
            window = np.empty((WINDOW_LEN, N_CHANNELS))
            window[: WINDOW_LEN - m] = rows[0]
            window[WINDOW_LEN - m :] = rows
        else:
            window = rows.copy()
        # Forward-fill missing channel values; anything still missing at the
        # left edge becomes 0.
        mask = ~np.isnan(window)
        if not mask.all():
            idx = np.where(mask, np.arange(WINDOW_LEN)[:, None], -1)
            np.maximum.accumulate(idx, axis=0, out=idx)
            for c in range(N_CHANNELS):
                col = window[:, c]
                src = idx[:, c]
                filled = np.where(src >= 0, col[np.maximum(src, 0)], 0.0)
                window[:, c] = filled
        return window

    def sensor_block(self, query: Location, hour: datetime) -> SensorWindowFeatures:
        """Windows for the 5 nearest sensors; silent or absent sensors are
        all-zero slots with inverse distance 0."""
        windows = np.zeros((N_NEIGHBORS, WINDOW_LEN, N_CHANNELS))
        inv = np.zeros(N_NEIGHBORS)
        order, dists = self._sensor_pick(query)
        hour_epoch = _epoch(hour)
        for slot, (idx, d) in enumerate(zip(order, dists)):
            window = self._window(int(idx), hour_epoch)
            if window is None:
                continue
            windows[slot] = window
            inv[slot] = _inv_distance(float(d))
        return SensorWindowFeatures(windows, inv)

    # -- context block -----------------------------------------------------

    def _context(self, query: Location):
        key = (query.lat, query.lon)
        hit = self._context_cache.get(key)
        if hit is None:
            d = distances_km(query.lat, query.lon, self._road_lats, self._road_lons)
            w = np.exp(-d / self._context_scale)
            roads = float(w @ self._road_len)
            major = float(w[self._road_major] @ self._road_len[self._road_major])
            nz = np.nonzero(w > 1e-15)[0]
            traffic_vec = w[nz] * self._road_len[nz] * self._road_cls[nz]
            hit = (roads, major, nz, traffic_vec)
            self._context_cache[key] = hit
        return hit

    def context_block(self, query: Location, hour: datetime) -> ContextFeatures:
        """Kernel-weighted road length, major-road length, and traffic
        emission proxy (jam * length * class); missing jam factors count 0."""
        roads, major, nz, traffic_vec = self._context(query)
        jam = self._jam.get(_epoch(hour), self._no_jam)
        traffic = float(traffic_vec @ jam[nz]) if len(nz) else 0.0
        return ContextFeatures(roads, major, traffic)

    # -- assembly ----------------------------------------------------------

    def build(self, query: Location, hour: datetime, variant: str, exclude: str | None = None) -> FeatureVector:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        context = self.context_block(query, hour)
        station = self.station_block(query, hour, exclude) if variant != "sensor" else None
        sensor = self.sensor_block(query, hour) if variant != "station" else None
        return assemble(variant, station, sensor, context)


def assemble(
    variant: str,
    station: StationFeatures | None,
    sensor: SensorWindowFeatures | None,
    context: ContextFeatures,
) -> FeatureVector:
    """Pack blocks into the documented per-variant layout."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    needs_station = variant in ("station", "station_and_sensor")
    needs_sensor = variant in ("sensor", "station_and_sensor")
    if needs_station != (station is not None) or needs_sensor != (sensor is not None):
        raise ValueError(f"blocks do not match variant {variant!r}")
    parts = []
    if needs_station:
        parts += [station.pm25_values, station.pm10_values,
                  station.pm25_inv_dist, station.pm10_inv_dist]
    if needs_sensor:
        # The same 5 sensors serve both pollutants; the inverse distances
        # are duplicated to give each pollutant its own copy.
        parts += [sensor.inv_dist, sensor.inv_dist]
    parts.append(np.array([
        context.roads_weighted_km,
        context.major_roads_weighted_km,
        context.traffic_weighted,
    ]))
    dense = np.concatenate(parts)
    assert dense.shape == (DENSE_WIDTH[variant],)
    windows = sensor.windows if needs_sensor else None
    return FeatureVector(variant, windows, dense)
