from datetime import datetime, timezone

import pytest

from airgrid.errors import DataError
from airgrid.geo import Location
from airgrid.ingest import (
    ABSOLUTE_CAP,
    StationRecord,
    filter_station_outliers,
    parse_roads,
    parse_sensors,
    parse_stations,
    parse_traffic,
    parse_utc,
)


def hour(h, day=1):
    return datetime(2019, 1, day, h, tzinfo=timezone.utc)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


STATION_HEADER = "station_id,lat,lon,hour_utc,pm25,pm10\n"
SENSOR_HEADER = "sensor_id,lat,lon,timestamp_utc,pm25,pm10,temperature,humidity\n"
ROAD_HEADER = "segment_id,lat,lon,length_km,functional_class,category\n"
TRAFFIC_HEADER = "segment_id,hour_utc,jam_factor\n"


class TestParseUtc:
    def test_hour_resolution(self):
        assert parse_utc("2019-01-01T05:00Z") == hour(5)

    def test_with_seconds(self):
        assert parse_utc("2019-01-01T05:00:00Z") == hour(5)

    def test_requires_z_suffix(self):
        with pytest.raises(ValueError):
            parse_utc("2019-01-01T05:00")


class TestParseStations:
    def test_direct_parse(self, tmp_path):
        path = write(tmp_path, "s.csv", STATION_HEADER + "S1,34.05,-118.24,2019-01-01T05:00Z,12.3,30.1\n")
        records, report = parse_stations(path)
        assert report.accepted == 1 and report.dropped == 0
        rec = records[0]
        assert rec.station_id == "S1"
        assert rec.location == Location(34.05, -118.24)
        assert rec.hour == hour(5)
        assert rec.pm25 == 12.3 and rec.pm10 == 30.1

    def test_na_marker_preserved(self, tmp_path):
        path = write(tmp_path, "s.csv", STATION_HEADER + "S1,34.05,-118.24,2019-01-01T05:00Z,12.3,NA\n")
        records, report = parse_stations(path)
        assert records[0].pm10 is None
        assert report.na_cells == 1

    def test_negative_concentration_dropped(self, tmp_path):
        path = write(tmp_path, "s.csv", STATION_HEADER + "S1,34.05,-118.24,2019-01-01T05:00Z,-4.0,30.1\n")
        records, report = parse_stations(path)
        assert records == []
        assert report.dropped == 1
        assert "negative concentration" in report.drop_reasons

    def test_both_na_dropped(self, tmp_path):
        path = write(tmp_path, "s.csv", STATION_HEADER + "S1,34.05,-118.24,2019-01-01T05:00Z,NA,\n")
        records, report = parse_stations(path)
        assert records == []
        assert report.dropped == 1

    def test_counts_add_up(self, tmp_path):
        rows = (
            "S1,34.05,-118.24,2019-01-01T05:00Z,12.3,30.1\n"
            "S2,bogus,-118.24,2019-01-01T05:00Z,1,2\n"
            "S3,34.05,-118.24,2019-01-01T05:00Z,NA,5.0\n"
        )
        _, report = parse_stations(write(tmp_path, "s.csv", STATION_HEADER + rows))
        assert report.accepted + report.dropped == 3

    def test_malformed_header_fatal(self, tmp_path):
        path = write(tmp_path, "s.csv", "wrong,header\nS1,1,2,3,4,5\n")
        with pytest.raises(DataError):
            parse_stations(path)

    def test_missing_file_fatal(self, tmp_path):
        with pytest.raises(DataError):
            parse_stations(tmp_path / "nope.csv")

    def test_reparse_is_identical(self, tmp_path):
        rows = STATION_HEADER + "S1,34.05,-118.24,2019-01-01T05:00Z,12.3,30.1\nS2,34.1,-118.3,2019-01-01T06:00Z,NA,9\n"
        path = write(tmp_path, "s.csv", rows)
        first, _ = parse_stations(path)
        second, _ = parse_stations(path)
        assert first == second


class TestParseSensors:
    def test_valid_row(self, tmp_path):
        path = write(tmp_path, "x.csv", SENSOR_HEADER + "L1,37.7,-122.4,2019-01-01T05:10Z,8.5,21.0,15.0,60.5\n")
        records, report = parse_sensors(path)
        assert report.accepted == 1
        rec = records[0]
        assert rec.sensor_id == "L1"
        assert rec.timestamp.minute == 10
        assert rec.humidity == 60.5

    def test_na_fields(self, tmp_path):
        path = write(tmp_path, "x.csv", SENSOR_HEADER + "L1,37.7,-122.4,2019-01-01T05:10Z,8.5,NA,,NA\n")
        records, report = parse_sensors(path)
        assert records[0].pm10 is None and records[0].temperature is None
        assert report.na_cells == 3

    def test_humidity_out_of_range_dropped(self, tmp_path):
        path = write(tmp_path, "x.csv", SENSOR_HEADER + "L1,37.7,-122.4,2019-01-01T05:10Z,8.5,21.0,15.0,130\n")
        records, report = parse_sensors(path)
        assert records == [] and report.dropped == 1


class TestParseRoads:
    def test_valid_row(self, tmp_path):
        path = write(tmp_path, "r.csv", ROAD_HEADER + "R1,37.7,-122.4,0.52,4,major_roads\n")
        records, report = parse_roads(path)
        assert report.accepted == 1
        assert records[0].functional_class == 4
        assert records[0].category == "major_roads"

    def test_zero_length_dropped(self, tmp_path):
        path = write(tmp_path, "r.csv", ROAD_HEADER + "R1,37.7,-122.4,0.0,4,roads\n")
        records, report = parse_roads(path)
        assert records == [] and report.dropped == 1

    def test_bad_class_dropped(self, tmp_path):
        path = write(tmp_path, "r.csv", ROAD_HEADER + "R1,37.7,-122.4,0.5,6,roads\n")
        _, report = parse_roads(path)
        assert report.dropped == 1


class TestParseTraffic:
    def test_valid_row(self, tmp_path):
        path = write(tmp_path, "t.csv", TRAFFIC_HEADER + "R1,2019-01-01T05:00Z,3.5\n")
        records, report = parse_traffic(path)
        assert report.accepted == 1
        assert records[0].jam_factor == 3.5

    def test_boundary_values_kept(self, tmp_path):
        path = write(tmp_path, "t.csv", TRAFFIC_HEADER + "R1,2019-01-01T05:00Z,0\nR1,2019-01-01T06:00Z,10\n")
        records, report = parse_traffic(path)
        assert report.accepted == 2

    def test_jam_factor_12_dropped(self, tmp_path):
        path = write(tmp_path, "t.csv", TRAFFIC_HEADER + "R1,2019-01-01T05:00Z,12\n")
        records, report = parse_traffic(path)
        assert records == [] and report.dropped == 1


def make_series(values, station="S1", pollutant="pm25"):
    out = []
    for i, v in enumerate(values):
        pm25 = v if pollutant == "pm25" else None
        pm10 = v if pollutant == "pm10" else None
        out.append(StationRecord(station, Location(0, 0), hour(i % 24, day=1 + i // 24), pm25, pm10))
    return out


class TestOutlierFilter:
    def test_constant_series_untouched(self):
        records = make_series([10.0] * 30)
        kept, rejected = filter_station_outliers(records)
        assert rejected == []
        assert kept == records

    def test_absolute_cap(self):
        records = make_series([10.0, 1500.0, 10.0])
        kept, rejected = filter_station_outliers(records)
        assert len(rejected) == 1
        assert rejected[0].pm25 == 1500.0
        # The offending value became NA, so the record drops out entirely.
        assert [r.pm25 for r in kept] == [10.0, 10.0]

    def test_relative_rule_hand_evaluated(self):
        # Trailing median 8 after six values; 50 > 5*8=40 rejected, 35 kept.
        records = make_series([8.0] * 6 + [50.0, 35.0])
        kept, rejected = filter_station_outliers(records)
        assert len(rejected) == 1 and rejected[0].pm25 == 50.0
        assert [r.pm25 for r in kept] == [8.0] * 6 + [35.0]

    def test_relative_rule_needs_six_trailing(self):
        # Only 5 trailing values: the relative rule must not fire.
        records = make_series([8.0] * 5 + [50.0])
        kept, rejected = filter_station_outliers(records)
        assert rejected == []
        assert len(kept) == 6

    def test_no_value_exceeds_cap_after_filter(self):
        records = make_series([999.0, 1200.0, 3000.0, 10.0])
        kept, _ = filter_station_outliers(records)
        for rec in kept:
            assert rec.pm25 is None or rec.pm25 <= ABSOLUTE_CAP

    def test_rejected_value_does_not_poison_median(self):
        # 1500 is rejected by the cap; the later median must ignore it.
        values = [8.0] * 6 + [1500.0] + [8.0] * 2 + [50.0]
        records = make_series(values)
        kept, rejected = filter_station_outliers(records)
        assert [r.pm25 for r in rejected] == [1500.0, 50.0]

    def test_pollutants_filtered_independently(self):
        records = [
            StationRecord("S1", Location(0, 0), hour(i), 8.0, 20.0) for i in range(7)
        ] + [StationRecord("S1", Location(0, 0), hour(7), 8.0, 2000.0)]
        kept, rejected = filter_station_outliers(records)
        assert len(rejected) == 1
        assert kept[-1].pm25 == 8.0 and kept[-1].pm10 is None
