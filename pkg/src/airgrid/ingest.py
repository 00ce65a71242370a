"""File-based ingestion of the four data sources.

CSV schemas (header required, comma-separated, UTF-8, timestamps ISO-8601
with a Z suffix):

    stations.csv:  station_id,lat,lon,hour_utc,pm25,pm10
    sensors.csv:   sensor_id,lat,lon,timestamp_utc,pm25,pm10,temperature,humidity
    roads.csv:     segment_id,lat,lon,length_km,functional_class,category
    traffic.csv:   segment_id,hour_utc,jam_factor

Missing values are the literal "NA" or an empty field and are kept as None.
Rows with unparseable or out-of-range fields are dropped and counted; parsing
is deterministic and order-preserving.
"""

from __future__ import annotations

import csv
import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import DataError
from .geo import Location

ROADS = "roads"
MAJOR_ROADS = "major_roads"


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    location: Location
    hour: datetime  # UTC, truncated to the hour
    pm25: float | None
    pm10: float | None


@dataclass(frozen=True)
class SensorRecord:
    sensor_id: str
    location: Location
    timestamp: datetime  # UTC, minute resolution
    pm25: float | None
    pm10: float | None
    temperature: float | None
    humidity: float | None


@dataclass(frozen=True)
class RoadSegment:
    segment_id: str
    midpoint: Location
    length_km: float
    functional_class: int  # 1 (small road) .. 5 (large road)
    category: str  # ROADS or MAJOR_ROADS


@dataclass(frozen=True)
class TrafficObservation:
    segment_id: str
    hour: datetime
    jam_factor: float  # congestion score in [0, 10]


@dataclass
class IngestReport:
    """Per-file parse accounting: accepted + dropped == total data rows."""

    path: str
    accepted: int = 0
    dropped: int = 0
    na_cells: int = 0
    drop_reasons: dict = field(default_factory=dict)

    def drop(self, reason: str):
        self.dropped += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1

    def summary(self) -> str:
        return (
            f"{self.path}: accepted={self.accepted} dropped={self.dropped} "
            f"na_cells={self.na_cells} reasons={self.drop_reasons}"
        )


def parse_utc(text: str) -> datetime:
    """Parse an ISO-8601 UTC timestamp with Z suffix, e.g. 2019-01-01T05:00Z."""
    if not text.endswith("Z"):
        raise ValueError(f"timestamp must end with Z: {text!r}")
    return datetime.fromisoformat(text[:-1]).replace(tzinfo=timezone.utc)


def _parse_value(cell: str) -> float | None:
    """A concentration/physical value: NA marker, or a finite float."""
    cell = cell.strip()
    if cell == "" or cell == "NA":
        return None
    value = float(cell)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value: {cell!r}")
    return value


def _open_rows(path, expected_header):
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(handle)
    try:
        header = next(reader)
    except StopIteration:
        handle.close()
        raise DataError(f"{path}: empty file, expected header {expected_header}")
    if [h.strip() for h in header] != expected_header:
        handle.close()
        raise DataError(f"{path}: malformed header {header}, expected {expected_header}")
    return handle, reader


def parse_stations(path) -> tuple[list[StationRecord], IngestReport]:
    """Parse station measurements; keeps NA markers, drops invalid rows.

    A row is dropped when any field is unparseable, a concentration is
    negative, or both pollutants are NA.
    """
    report = IngestReport(path=str(path))
    records: list[StationRecord] = []
    handle, reader = _open_rows(path, ["station_id", "lat", "lon", "hour_utc", "pm25", "pm10"])
    with handle:
        for row in reader:
            try:
                if len(row) != 6:
                    raise ValueError("wrong field count")
                station_id = row[0].strip()
                if not station_id:
                    raise ValueError("empty station_id")
                loc = Location(float(row[1]), float(row[2]))
                hour = parse_utc(row[3])
                if hour.minute or hour.second or hour.microsecond:
                    raise ValueError("hour not truncated")
                pm25 = _parse_value(row[4])
                pm10 = _parse_value(row[5])
            except ValueError as exc:
                report.drop(str(exc) or "unparseable")
                continue
            if (pm25 is not None and pm25 < 0) or (pm10 is not None and pm10 < 0):
                report.drop("negative concentration")
                continue
            if pm25 is None and pm10 is None:
                report.drop("both pollutants NA")
                continue
            report.na_cells += (pm25 is None) + (pm10 is None)
            records.append(StationRecord(station_id, loc, hour, pm25, pm10))
            report.accepted += 1
    return records, report


def parse_sensors(path) -> tuple[list[SensorRecord], IngestReport]:
    """Parse low-cost sensor measurements (minute resolution, NA-capable)."""
    report = IngestReport(path=str(path))
    records: list[SensorRecord] = []
    expected = ["sensor_id", "lat", "lon", "timestamp_utc", "pm25", "pm10", "temperature", "humidity"]
    handle, reader = _open_rows(path, expected)
    ts_cache: dict[str, datetime] = {}
    with handle:
        for row in reader:
            try:
                if len(row) != 8:
                    raise ValueError("wrong field count")
                sensor_id = row[0].strip()
                if not sensor_id:
                    raise ValueError("empty sensor_id")
                loc = Location(float(row[1]), float(row[2]))
                ts_text = row[3]
                ts = ts_cache.get(ts_text)
                if ts is None:
                    ts = parse_utc(ts_text)
                    ts_cache[ts_text] = ts
                pm25 = _parse_value(row[4])
                pm10 = _parse_value(row[5])
                temperature = _parse_value(row[6])
                humidity = _parse_value(row[7])
            except ValueError as exc:
                report.drop(str(exc) or "unparseable")
                continue
            if (pm25 is not None and pm25 < 0) or (pm10 is not None and pm10 < 0):
                report.drop("negative concentration")
                continue
            if humidity is not None and not 0.0 <= humidity <= 100.0:
                report.drop("humidity out of range")
                continue
            report.na_cells += sum(v is None for v in (pm25, pm10, temperature, humidity))
            records.append(SensorRecord(sensor_id, loc, ts, pm25, pm10, temperature, humidity))
            report.accepted += 1
    return records, report


def parse_roads(path) -> tuple[list[RoadSegment], IngestReport]:
    """Parse road segments (midpoint + length + class + category)."""
    report = IngestReport(path=str(path))
    records: list[RoadSegment] = []
    expected = ["segment_id", "lat", "lon", "length_km", "functional_class", "category"]
    handle, reader = _open_rows(path, expected)
    with handle:
        for row in reader:
            try:
                if len(row) != 6:
                    raise ValueError("wrong field count")
                segment_id = row[0].strip()
                if not segment_id:
                    raise ValueError("empty segment_id")
                loc = Location(float(row[1]), float(row[2]))
                length = float(row[3])
                fclass = int(row[4])
                category = row[5].strip()
            except ValueError as exc:
                report.drop(str(exc) or "unparseable")
                continue
            if not (math.isfinite(length) and length > 0):
                report.drop("non-positive length")
                continue
            if fclass not in (1, 2, 3, 4, 5):
                report.drop("functional_class out of range")
                continue
            if category not in (ROADS, MAJOR_ROADS):
                report.drop("unknown category")
                continue
            records.append(RoadSegment(segment_id, loc, length, fclass, category))
            report.accepted += 1
    return records, report


def parse_traffic(path) -> tuple[list[TrafficObservation], IngestReport]:
    """Parse hourly jam factors per road segment."""
    report = IngestReport(path=str(path))
    records: list[TrafficObservation] = []
    handle, reader = _open_rows(path, ["segment_id", "hour_utc", "jam_factor"])
    ts_cache: dict[str, datetime] = {}
    with handle:
        for row in reader:
            try:
                if len(row) != 3:
                    raise ValueError("wrong field count")
                segment_id = row[0].strip()
                if not segment_id:
                    raise ValueError("empty segment_id")
                ts_text = row[1]
                hour = ts_cache.get(ts_text)
                if hour is None:
                    hour = parse_utc(ts_text)
                    ts_cache[ts_text] = hour
                jam = float(row[2])
            except ValueError as exc:
                report.drop(str(exc) or "unparseable")
                continue
            if not (math.isfinite(jam) and 0.0 <= jam <= 10.0):
                report.drop("jam_factor out of range")
                continue
            records.append(TrafficObservation(segment_id, hour, jam))
            report.accepted += 1
    return records, report


# Outlier rejection thresholds for station measurements. A value is rejected
# when it exceeds the absolute cap, or when it exceeds RELATIVE_FACTOR times
# the median of the station's kept same-pollutant values over the trailing 24
# hours (the relative rule needs at least MIN_TRAILING values to apply).
ABSOLUTE_CAP = 1000.0
RELATIVE_FACTOR = 5.0
MIN_TRAILING = 6
TRAILING_HOURS = 24


def filter_station_outliers(
    records: list[StationRecord],
) -> tuple[list[StationRecord], list[StationRecord]]:
    """Reject abnormally high station values; rejected values become NA.

    ``records`` must be sorted by (station_id, hour). Returns the kept
    records (rejections set to NA, records left with no value dropped) and
    the original records that had at least one value rejected. Medians are
    computed over values that survived earlier filtering, so one bad value
    cannot mask the next.
    """
    kept: list[StationRecord] = []
    rejected: list[StationRecord] = []
    # Rolling per-(station, pollutant) window; input ordering keeps it sorted.
    history: dict[tuple[str, str], deque] = {}

    def is_outlier(station_id: str, pollutant: str, hour: datetime, value: float) -> bool:
        if value > ABSOLUTE_CAP:
            return True
        trail = history.setdefault((station_id, pollutant), deque())
        while trail and (hour - trail[0][0]).total_seconds() > TRAILING_HOURS * 3600:
            trail.popleft()
        window = [v for t, v in trail if t < hour]
        if len(window) >= MIN_TRAILING and value > RELATIVE_FACTOR * statistics.median(window):
            return True
        return False

    for rec in records:
        bad = False
        pm25, pm10 = rec.pm25, rec.pm10
        if pm25 is not None and is_outlier(rec.station_id, "pm25", rec.hour, pm25):
            pm25, bad = None, True
        if pm10 is not None and is_outlier(rec.station_id, "pm10", rec.hour, pm10):
            pm10, bad = None, True
        if pm25 is not None:
            history.setdefault((rec.station_id, "pm25"), deque()).append((rec.hour, pm25))
        if pm10 is not None:
            history.setdefault((rec.station_id, "pm10"), deque()).append((rec.hour, pm10))
        if bad:
            rejected.append(rec)
        if pm25 is None and pm10 is None:
            continue
        if bad:
            kept.append(StationRecord(rec.station_id, rec.location, rec.hour, pm25, pm10))
        else:
            kept.append(rec)
    return kept, rejected
