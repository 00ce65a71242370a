"""Synthetic world generator with closed-form ground truth.

The pollution field is a sum of non-negative terms, each exactly evaluable at
any location and (fractional) hour:

    pm25(l, t) = base25
               + amp25 * (1 + sin(2*pi*(t - phase)/24))           diurnal
               + grad25 * ramp(l)                                  regional
               + sum_j bump25_j * osc_j(t) * gauss(l; c_j, sigma_j)
               + sum_e ev25_e * gauss(l; c_e, s_e) * gauss(t; t_e, tau_e)
               + sum_s plume25 * jam_s(t) * len_s * cls_s * gauss(l; mid_s, w)

where osc_j(t) = (1 + sin(2*pi*(t - phase_j)/period_j))/2 makes every
neighborhood term drift on an 18 to 72 hour cycle. The drift matters: a
static local level could be memorized from a station's distance
fingerprint, while a drifting one must be read off the current
measurements of the neighboring stations and sensors.

    pm10(l, t) = pm25(l, t) + the same structure with its own coefficients,
                 so pm10 >= pm25 everywhere.

Plumes sit on major road segments with the jam factors written to
traffic.csv, so the traffic feature is genuinely predictive. Neighborhood
bumps and transient events are deliberately invisible to road features:
they are the local structure only nearby sensors can resolve.

Stations sample the field exactly. Sensors sample it every 10 minutes with
multiplicative lognormal noise and a humidity-dependent positive bias, the
two low-cost-sensor artifacts the prediction engine is expected to absorb.

Output: the four ingestion CSVs plus a truth_params.txt holding every field
parameter, so the field can be re-evaluated exactly (the end-to-end oracle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import DataError
from .geo import KM_PER_DEGREE, Location, distances_km

PLUME_WIDTH_KM = 0.15
DEFAULT_START = datetime(2019, 1, 1, tzinfo=timezone.utc)


@dataclass
class WorldSpec:
    lat_min: float = 37.0
    lat_max: float = 39.7
    lon_min: float = -123.2
    lon_max: float = -119.8
    n_stations: int = 24
    n_sensors: int = 120
    n_road_segments: int = 120
    hours: int = 72
    seed: int = 20190101
    sensor_noise_std: float = 0.2  # lognormal sigma, multiplicative
    humidity_bias_coef: float = 0.01  # relative bias per %RH above 60
    background_pm25: float = 8.0
    background_pm10: float = 20.0
    pm10_station_fraction: float = 0.6
    # None scales the spatial texture with the box area and time span:
    # roughly one neighborhood bump per 400 km2 and enough transient events
    # to cover a notable share of station-hours.
    n_bumps: int | None = None
    n_events: int | None = None
    start: datetime = field(default_factory=lambda: DEFAULT_START)

    def __post_init__(self):
        if self.lat_min >= self.lat_max or self.lon_min >= self.lon_max:
            raise ValueError("bounding box must be well ordered")
        if min(self.n_stations, self.n_sensors, self.n_road_segments, self.hours) < 0:
            raise ValueError("counts must be >= 0")
        if self.sensor_noise_std < 0:
            raise ValueError("noise std must be >= 0")
        if self.n_bumps is None:
            self.n_bumps = max(8, int(self.area_km2 / 400))
        if self.n_events is None:
            self.n_events = max(4, int(self.hours * self.area_km2 / 150_000))

    @property
    def area_km2(self) -> float:
        mid = math.radians((self.lat_min + self.lat_max) / 2)
        return (
            (self.lat_max - self.lat_min) * KM_PER_DEGREE
            * (self.lon_max - self.lon_min) * KM_PER_DEGREE * math.cos(mid)
        )


@dataclass
class TruthParams:
    """Everything needed to evaluate the field exactly at any point."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    start: datetime
    base25: float
    base10_gap: float
    amp25: float
    amp10: float
    phase: float
    grad25: float
    grad10: float
    # bumps: (lat, lon, sigma_km, amp25, amp10, period_h, phase_h)
    bumps: np.ndarray
    # events: (lat, lon, sigma_km, t_center_h, tau_h, amp25, amp10)
    events: np.ndarray
    # plumes: (lat, lon, length_km, fclass, jam_base, jam_peak_h, coef25, coef10)
    plumes: np.ndarray


def _ramp(params: TruthParams, lats, lons):
    """Smooth regional gradient in [0, 1], zero at the box's SW corner."""
    u = (np.asarray(lats) - params.lat_min) / (params.lat_max - params.lat_min)
    v = (np.asarray(lons) - params.lon_min) / (params.lon_max - params.lon_min)
    return 0.5 * (u + v)


def jam_factor(base, peak_hour, t_hours):
    """Deterministic diurnal congestion profile, clipped to [0, 10]."""
    return np.clip(base * (1.0 + np.sin(2.0 * np.pi * (t_hours - peak_hour) / 24.0)), 0.0, 10.0)


def truth_at(params: TruthParams, location: Location, t_hours: float) -> tuple[float, float]:
    """Exact field evaluation at a location and fractional hour offset."""
    pm25, pm10 = _truth_series(params, location.lat, location.lon,
                               np.array([t_hours], dtype=np.float64))
    return float(pm25[0]), float(pm10[0])


def _truth_series(params: TruthParams, lat: float, lon: float, t_hours: np.ndarray):
    """Vectorized truth at one location over many times; matches truth_at."""
    diurnal = 1.0 + np.sin(2.0 * np.pi * (t_hours - params.phase) / 24.0)
    ramp = float(_ramp(params, lat, lon))
    pm25 = params.base25 + params.amp25 * diurnal + params.grad25 * ramp
    extra10 = params.base10_gap + params.amp10 * diurnal + params.grad10 * ramp
    if len(params.bumps):
        d = distances_km(lat, lon, params.bumps[:, 0], params.bumps[:, 1])
        g = np.exp(-0.5 * (d / params.bumps[:, 2]) ** 2)
        near = g > 1e-12
        if near.any():
            bu = params.bumps[near]
            osc = 0.5 * (1.0 + np.sin(2.0 * np.pi * (t_hours[:, None] - bu[None, :, 6]) / bu[None, :, 5]))
            weighted = g[near][None, :] * osc
            pm25 = pm25 + weighted @ bu[:, 3]
            extra10 = extra10 + weighted @ bu[:, 4]
    if len(params.events):
        d = distances_km(lat, lon, params.events[:, 0], params.events[:, 1])
        g = np.exp(-0.5 * (d / params.events[:, 2]) ** 2)
        near = g > 1e-12  # distant events contribute nothing material
        if near.any():
            ev = params.events[near]
            w = g[near][None, :] * np.exp(-0.5 * ((t_hours[:, None] - ev[None, :, 3]) / ev[None, :, 4]) ** 2)
            pm25 = pm25 + w @ ev[:, 5]
            extra10 = extra10 + w @ ev[:, 6]
    if len(params.plumes):
        d = distances_km(lat, lon, params.plumes[:, 0], params.plumes[:, 1])
        g = np.exp(-0.5 * (d / PLUME_WIDTH_KM) ** 2)
        scale = g * params.plumes[:, 2] * params.plumes[:, 3]
        keep = scale > 1e-15  # distant plumes contribute nothing material
        if keep.any():
            jam = jam_factor(params.plumes[keep, 4][None, :], params.plumes[keep, 5][None, :], t_hours[:, None])
            emission = jam * scale[keep][None, :]
            pm25 = pm25 + emission @ params.plumes[keep, 6]
            extra10 = extra10 + emission @ params.plumes[keep, 7]
    pm25 = np.broadcast_to(pm25, t_hours.shape).astype(np.float64, copy=True)
    return pm25, pm25 + extra10


def _r(x) -> str:
    """Shortest exact decimal for a float; parses back bit-identically."""
    return repr(float(x))


def _iso_hour(dt: datetime) -> str:
    return dt.strftime("%Y-%m-%dT%H:%MZ")


def generate(spec: WorldSpec, out_dir) -> TruthParams:
    """Write stations/sensors/roads/traffic CSVs plus truth_params.txt.

    Deterministic per seed: identical specs produce byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    lat_span = spec.lat_max - spec.lat_min
    lon_span = spec.lon_max - spec.lon_min
    box_km = (spec.lat_max - spec.lat_min) * KM_PER_DEGREE

    def rand_lat(n):
        return np.round(rng.uniform(spec.lat_min, spec.lat_max, n), 6)

    def rand_lon(n):
        return np.round(rng.uniform(spec.lon_min, spec.lon_max, n), 6)

    # Roads. Major roads are the high-class segments; they carry the plumes.
    road_lats = rand_lat(spec.n_road_segments)
    road_lons = rand_lon(spec.n_road_segments)
    road_len = np.round(rng.uniform(0.05, 1.2, spec.n_road_segments), 4)
    road_cls = rng.integers(1, 6, spec.n_road_segments)
    road_major = road_cls >= 4
    jam_base = np.round(rng.uniform(1.0, 4.0, spec.n_road_segments), 4)
    jam_peak = np.round(rng.uniform(0.0, 24.0, spec.n_road_segments), 4)

    # Stations. A fixed fraction monitors PM10 in addition to PM2.5.
    st_lats = rand_lat(spec.n_stations)
    st_lons = rand_lon(spec.n_stations)
    has_pm10 = rng.random(spec.n_stations) < spec.pm10_station_fraction

    # Sensors cluster around a subset of stations (plus a few free-floating
    # hotspots), so the sensor density at stations spans a wide range.
    n_clusters = max(1, min(spec.n_stations, spec.n_sensors // 12)) if spec.n_sensors else 0
    cluster_lat = np.empty(n_clusters)
    cluster_lon = np.empty(n_clusters)
    if n_clusters:
        anchor = rng.permutation(spec.n_stations)[: max(1, int(n_clusters * 0.45))]
        for i in range(n_clusters):
            if i < len(anchor):
                cluster_lat[i] = st_lats[anchor[i]] + rng.normal(0, 0.5 / KM_PER_DEGREE)
                cluster_lon[i] = st_lons[anchor[i]] + rng.normal(0, 0.5 / KM_PER_DEGREE)
            else:
                cluster_lat[i] = rng.uniform(spec.lat_min, spec.lat_max)
                cluster_lon[i] = rng.uniform(spec.lon_min, spec.lon_max)
    cluster_sigma = rng.uniform(0.8, 2.5, n_clusters) if n_clusters else np.empty(0)
    sizes = np.zeros(n_clusters, dtype=int)
    if n_clusters:
        raw = rng.uniform(0.5, 1.5, n_clusters)
        sizes = np.floor(raw / raw.sum() * spec.n_sensors).astype(int)
        sizes[: spec.n_sensors - sizes.sum()] += 1
    se_lats = np.empty(spec.n_sensors)
    se_lons = np.empty(spec.n_sensors)
    pos = 0
    for c in range(n_clusters):
        k = sizes[c]
        se_lats[pos : pos + k] = cluster_lat[c] + rng.normal(0, cluster_sigma[c] / KM_PER_DEGREE, k)
        se_lons[pos : pos + k] = cluster_lon[c] + rng.normal(
            0, cluster_sigma[c] / (KM_PER_DEGREE * math.cos(math.radians(cluster_lat[c]))), k
        )
        pos += k
    se_lats = np.round(np.clip(se_lats, spec.lat_min, spec.lat_max), 6)
    se_lons = np.round(np.clip(se_lons, spec.lon_min, spec.lon_max), 6)
    hum_phase = rng.uniform(0, 24, spec.n_sensors)
    hum_offset = rng.uniform(-8, 8, spec.n_sensors)
    temp_offset = rng.uniform(-3, 3, spec.n_sensors)

    # Field terms. Bumps are the dominant spatial texture between stations;
    # events add transient local structure that only nearby sensors can see.
    bump_sigma_hi = min(12.0, max(3.5, box_km / 6))
    bumps = np.zeros((spec.n_bumps, 7))
    if spec.n_bumps:
        bumps[:, 0] = rand_lat(spec.n_bumps)
        bumps[:, 1] = rand_lon(spec.n_bumps)
        bumps[:, 2] = rng.uniform(3.0, bump_sigma_hi, spec.n_bumps)
        bumps[:, 3] = rng.uniform(0.0, 6.0, spec.n_bumps)
        bumps[:, 4] = rng.uniform(0.0, 5.0, spec.n_bumps)
        bumps[:, 5] = rng.uniform(18.0, 72.0, spec.n_bumps)
        bumps[:, 6] = rng.uniform(0.0, 72.0, spec.n_bumps)
    event_sigma_hi = min(15.0, max(5.5, box_km / 5))
    events = np.zeros((spec.n_events, 7))
    if spec.n_events:
        events[:, 0] = rand_lat(spec.n_events)
        events[:, 1] = rand_lon(spec.n_events)
        events[:, 2] = rng.uniform(5.0, event_sigma_hi, spec.n_events)
        events[:, 3] = rng.uniform(0.0, max(1.0, float(spec.hours)), spec.n_events)
        events[:, 4] = rng.uniform(3.0, 8.0, spec.n_events)
        events[:, 5] = rng.uniform(4.0, 14.0, spec.n_events)
        events[:, 6] = rng.uniform(0.0, 8.0, spec.n_events)
    plumes = np.zeros((int(road_major.sum()), 8))
    plumes[:, 0] = road_lats[road_major]
    plumes[:, 1] = road_lons[road_major]
    plumes[:, 2] = road_len[road_major]
    plumes[:, 3] = road_cls[road_major]
    plumes[:, 4] = jam_base[road_major]
    plumes[:, 5] = jam_peak[road_major]
    plumes[:, 6] = 0.2
    plumes[:, 7] = 0.15

    params = TruthParams(
        lat_min=spec.lat_min,
        lat_max=spec.lat_max,
        lon_min=spec.lon_min,
        lon_max=spec.lon_max,
        start=spec.start,
        base25=spec.background_pm25,
        base10_gap=spec.background_pm10 - spec.background_pm25,
        amp25=2.0,
        amp10=3.0,
        phase=14.0,
        grad25=3.0,
        grad10=5.0,
        bumps=bumps,
        events=events,
        plumes=plumes,
    )

    hour_dt = [spec.start + timedelta(hours=h) for h in range(spec.hours)]
    hour_txt = [_iso_hour(dt) for dt in hour_dt]
    t_hours = np.arange(spec.hours, dtype=np.float64)

    with open(out / "roads.csv", "w", encoding="utf-8") as f:
        f.write("segment_id,lat,lon,length_km,functional_class,category\n")
        for i in range(spec.n_road_segments):
            cat = "major_roads" if road_major[i] else "roads"
            f.write(
                f"RD{i:04d},{_r(road_lats[i])},{_r(road_lons[i])},{_r(road_len[i])},{road_cls[i]},{cat}\n"
            )

    with open(out / "traffic.csv", "w", encoding="utf-8") as f:
        f.write("segment_id,hour_utc,jam_factor\n")
        for i in range(spec.n_road_segments):
            jams = jam_factor(jam_base[i], jam_peak[i], t_hours)
            sid = f"RD{i:04d}"
            for h in range(spec.hours):
                f.write(f"{sid},{hour_txt[h]},{_r(jams[h])}\n")

    with open(out / "stations.csv", "w", encoding="utf-8") as f:
        f.write("station_id,lat,lon,hour_utc,pm25,pm10\n")
        for i in range(spec.n_stations):
            pm25, pm10 = _truth_series(params, st_lats[i], st_lons[i], t_hours)
            sid = f"ST{i:03d}"
            lat_r, lon_r = _r(st_lats[i]), _r(st_lons[i])
            for h in range(spec.hours):
                pm10_txt = _r(pm10[h]) if has_pm10[i] else "NA"
                f.write(f"{sid},{lat_r},{lon_r},{hour_txt[h]},{_r(pm25[h])},{pm10_txt}\n")

    ticks_per_hour = 6  # one measurement every 10 minutes
    n_ticks = spec.hours * ticks_per_hour
    tick_hours = np.arange(n_ticks, dtype=np.float64) / ticks_per_hour
    tick_txt = [
        _iso_hour(spec.start + timedelta(minutes=10 * k)) for k in range(n_ticks)
    ]
    with open(out / "sensors.csv", "w", encoding="utf-8") as f:
        f.write("sensor_id,lat,lon,timestamp_utc,pm25,pm10,temperature,humidity\n")
        for i in range(spec.n_sensors):
            pm25, pm10 = _truth_series(params, se_lats[i], se_lons[i], tick_hours)
            humidity = np.round(
                np.clip(65.0 + 18.0 * np.sin(2 * np.pi * (tick_hours - hum_phase[i]) / 24.0) + hum_offset[i], 20.0, 95.0),
                4,
            )
            temperature = np.round(15.0 + 8.0 * np.sin(2 * np.pi * (tick_hours - 6.0) / 24.0) + temp_offset[i], 4)
            bias = 1.0 + spec.humidity_bias_coef * np.maximum(0.0, humidity - 60.0)
            if spec.sensor_noise_std > 0:
                noise25 = np.exp(rng.normal(0.0, spec.sensor_noise_std, n_ticks))
                noise10 = np.exp(rng.normal(0.0, spec.sensor_noise_std, n_ticks))
            else:
                noise25 = noise10 = np.ones(n_ticks)
            meas25 = pm25 * noise25 * bias
            meas10 = pm10 * noise10 * bias
            sid = f"LC{i:04d}"
            lat_r, lon_r = _r(se_lats[i]), _r(se_lons[i])
            for k in range(n_ticks):
                f.write(
                    f"{sid},{lat_r},{lon_r},{tick_txt[k]},{_r(meas25[k])},{_r(meas10[k])},{_r(temperature[k])},{_r(humidity[k])}\n"
                )

    write_truth_params(params, out / "truth_params.txt")
    return params


def write_truth_params(params: TruthParams, path):
    with open(path, "w", encoding="utf-8") as f:
        for name in ("lat_min", "lat_max", "lon_min", "lon_max"):
            f.write(f"{name} {_r(getattr(params, name))}\n")
        f.write(f"start {_iso_hour(params.start)}\n")
        for name in ("base25", "base10_gap", "amp25", "amp10", "phase", "grad25", "grad10"):
            f.write(f"{name} {_r(getattr(params, name))}\n")
        for row in params.bumps:
            f.write("bump " + " ".join(_r(v) for v in row) + "\n")
        for row in params.events:
            f.write("event " + " ".join(_r(v) for v in row) + "\n")
        for row in params.plumes:
            f.write("plume " + " ".join(_r(v) for v in row) + "\n")


def read_truth_params(path) -> TruthParams:
    scalars: dict[str, float] = {}
    start = DEFAULT_START
    bumps, events, plumes = [], [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read truth params {path}: {exc}") from exc
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        key, rest = parts[0], parts[1:]
        if key == "bump":
            bumps.append([float(v) for v in rest])
        elif key == "event":
            events.append([float(v) for v in rest])
        elif key == "plume":
            plumes.append([float(v) for v in rest])
        elif key == "start":
            start = datetime.strptime(rest[0], "%Y-%m-%dT%H:%MZ").replace(tzinfo=timezone.utc)
        else:
            scalars[key] = float(rest[0])
    return TruthParams(
        start=start,
        bumps=np.array(bumps).reshape(-1, 7),
        events=np.array(events).reshape(-1, 7),
        plumes=np.array(plumes).reshape(-1, 8),
        **scalars,
    )
