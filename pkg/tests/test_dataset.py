import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from scipy.stats import ks_2samp

from airgrid.dataset import (
    Dataset,
    NormStats,
    SplitPlan,
    build_dataset,
    fit_normalization,
    invert_dense,
    invert_windows,
    load_dataset,
    load_norm_stats,
    load_split,
    normalize_dense,
    normalize_windows,
    save_dataset,
    save_norm_stats,
    save_split,
    stratified_split,
)
from airgrid.errors import DataError
from airgrid.geo import Location
from airgrid.ingest import SensorRecord, StationRecord

H0 = datetime(2019, 1, 5, 0, tzinfo=timezone.utc)


def hour(k):
    return H0 + timedelta(hours=k)


def station_series(sid, loc, values):
    """values: list of (pm25, pm10) per hour."""
    return [StationRecord(sid, loc, hour(k), v25, v10) for k, (v25, v10) in enumerate(values)]


class TestBuildDataset:
    def test_two_stations_three_hours(self):
        a = station_series("A", Location(37.5, -122.2), [(5, 10)] * 3)
        b = station_series("B", Location(37.6, -122.3), [(6, 12)] * 3)
        ds = build_dataset(a + b, [], [], [], "station")
        assert len(ds) == 6
        # Ordered by (station_id, hour).
        assert [ds.station_ids[i] for i in ds.point_station.tolist()] == ["A"] * 3 + ["B"] * 3
        assert ds.point_hour[:3].tolist() == sorted(ds.point_hour[:3].tolist())

    def test_pm25_only_station_mask(self):
        recs = station_series("A", Location(37.5, -122.2), [(5, None)] * 2)
        ds = build_dataset(recs, [], [], [], "station")
        assert ds.masks.tolist() == [[True, False]] * 2
        assert np.isnan(ds.targets[:, 1]).all()

    def test_point_count_matches_hand_count(self):
        # 5 stations; hours with both values missing yield no point.
        loc = Location(37.5, -122.2)
        recs = []
        per_station = {"A": 3, "B": 2, "C": 3, "D": 1, "E": 0}
        for sid, n_good in per_station.items():
            vals = [(4.0, 8.0)] * n_good + [(None, None)] * (3 - n_good)
            recs += [
                StationRecord(sid, loc, hour(k), v25, v10)
                for k, (v25, v10) in enumerate(vals)
                if not (v25 is None and v10 is None)  # ingest drops these
            ]
        ds = build_dataset(recs, [], [], [], "station")
        assert len(ds) == sum(per_station.values())

    def test_self_exclusion(self):
        target = station_series("A", Location(37.5, -122.2), [(99.0, 77.0)])
        other = station_series("B", Location(37.51, -122.21), [(5.0, 10.0)])
        ds = build_dataset(target + other, [], [], [], "station")
        row_a = ds.dense[0]
        assert 99.0 not in row_a[:10] and 77.0 not in row_a[:10]

    def test_empty_sources(self):
        ds = build_dataset([], [], [], [], "station")
        assert len(ds) == 0


class TestStratifiedSplit:
    def test_exact_eight_two_per_decile(self):
        rng = np.random.default_rng(0)
        densities = {f"ST{i:03d}": float(rng.uniform(0, 5)) for i in range(100)}
        plan = stratified_split(densities, 0.8, seed=3)
        assert plan.decile_counts == [(8, 2)] * 10
        assert len(plan.train_station_ids) == 80
        assert len(plan.eval_station_ids) == 20
        assert set(plan.train_station_ids).isdisjoint(plan.eval_station_ids)
        assert set(plan.train_station_ids) | set(plan.eval_station_ids) == set(densities)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(1)
        densities = {f"S{i}": float(rng.uniform(0, 5)) for i in range(57)}
        a = stratified_split(densities, 0.8, seed=9)
        b = stratified_split(densities, 0.8, seed=9)
        assert a.train_station_ids == b.train_station_ids
        c = stratified_split(densities, 0.8, seed=10)
        assert c.train_station_ids != a.train_station_ids

    def test_remainder_spread_over_lowest_deciles(self):
        densities = {f"S{i:03d}": float(i) for i in range(103)}
        plan = stratified_split(densities, 0.8, seed=1)
        sizes = [t + e for t, e in plan.decile_counts]
        assert sizes == [11, 11, 11, 10, 10, 10, 10, 10, 10, 10]

    def test_fallback_below_ten_stations(self):
        densities = {f"S{i}": float(i) for i in range(6)}
        plan = stratified_split(densities, 0.8, seed=1)
        assert len(plan.decile_counts) == 1
        assert len(plan.train_station_ids) + len(plan.eval_station_ids) == 6

    def test_ks_beats_random_splits(self):
        # Monte-Carlo oracle: the stratified split's train/eval density KS
        # distance beats at least 95% of 1000 plain random splits.
        rng = np.random.default_rng(12)
        values = np.concatenate([rng.uniform(0, 0.5, 60), rng.uniform(1, 5, 40)])
        densities = {f"S{i:03d}": float(values[i]) for i in range(100)}
        plan = stratified_split(densities, 0.8, seed=5)
        d_train = np.array([densities[s] for s in plan.train_station_ids])
        d_eval = np.array([densities[s] for s in plan.eval_station_ids])
        ks_strat = ks_2samp(d_train, d_eval).statistic
        beaten = 0
        for trial in range(1000):
            perm = rng.permutation(100)
            ks_rand = ks_2samp(values[perm[:80]], values[perm[80:]]).statistic
            beaten += ks_rand > ks_strat
        assert beaten >= 950

    def test_split_round_trip(self, tmp_path):
        densities = {f"S{i:02d}": float(i) * 0.1 for i in range(20)}
        plan = stratified_split(densities, 0.8, seed=2)
        save_split(plan, tmp_path / "split.txt")
        loaded = load_split(tmp_path / "split.txt")
        assert sorted(loaded.train_station_ids) == sorted(plan.train_station_ids)
        assert sorted(loaded.eval_station_ids) == sorted(plan.eval_station_ids)
        assert loaded.seed == plan.seed
        assert loaded.densities == plan.densities


def dataset_from_dense(dense, variant="station"):
    dense = np.asarray(dense, dtype=np.float32)
    n = len(dense)
    windows = None if variant == "station" else np.zeros((n, 5, 16, 4), np.float32)
    return Dataset(
        variant, ["A"], [Location(0, 0)],
        np.zeros(n, np.int32), np.arange(n, dtype=np.int64) * 3600,
        windows, dense, np.ones((n, 2), np.float32), np.ones((n, 2), bool),
    )


class TestNormalization:
    def test_log1p_slot_hand_values(self):
        # A station measurement slot with {0, e-1}: log1p -> {0, 1},
        # mean 0.5, population std 0.5.
        dense = np.full((2, 23), 1.0, dtype=np.float32)
        dense[0, 0] = 0.0
        dense[1, 0] = math.e - 1.0
        stats = fit_normalization(dataset_from_dense(dense))
        assert stats.dense_mean[0] == pytest.approx(0.5, rel=1e-6)
        assert stats.dense_std[0] == pytest.approx(0.5, rel=1e-6)

    def test_constant_feature_clamped(self):
        dense = np.full((4, 23), 2.5, dtype=np.float32)
        stats = fit_normalization(dataset_from_dense(dense))
        assert stats.dense_std[20] == 1.0
        z = normalize_dense(dense, stats)
        np.testing.assert_allclose(z[:, 20], 0.0, atol=1e-12)

    def test_all_na_slot(self):
        dense = np.full((3, 23), 1.0, dtype=np.float32)
        dense[:, 4] = np.nan
        ds = dataset_from_dense(dense)
        stats = fit_normalization(ds)
        z = normalize_dense(dense, stats)
        np.testing.assert_array_equal(z[:, 4], 0.0)
        # Presence flag for slot 4 is appended column 23 + 4.
        np.testing.assert_array_equal(z[:, 23 + 4], 0.0)
        np.testing.assert_array_equal(z[:, 23 + 0], 1.0)

    def test_round_trip_inversion(self):
        rng = np.random.default_rng(7)
        dense = rng.uniform(0.0, 50.0, (20, 23)).astype(np.float32)
        dense[rng.random((20, 23)) < 0.1] = np.nan
        dense[:, 10:] = np.abs(dense[:, 10:])
        ds = dataset_from_dense(dense)
        stats = fit_normalization(ds)
        z = normalize_dense(dense, stats)
        raw = invert_dense(z, stats)
        mask = ~np.isnan(dense)
        np.testing.assert_allclose(raw[mask], dense[mask].astype(np.float64), rtol=1e-10, atol=1e-12)

    def test_window_round_trip(self):
        rng = np.random.default_rng(8)
        windows = rng.uniform(0, 80, (6, 5, 16, 4)).astype(np.float32)
        ds = Dataset(
            "sensor", ["A"], [Location(0, 0)], np.zeros(6, np.int32),
            np.arange(6, dtype=np.int64) * 3600, windows,
            np.zeros((6, 13), np.float32), np.ones((6, 2), np.float32), np.ones((6, 2), bool),
        )
        stats = fit_normalization(ds)
        z = normalize_windows(windows, stats)
        raw = invert_windows(z, stats)
        np.testing.assert_allclose(raw, windows.astype(np.float64), rtol=1e-10, atol=1e-10)

    def test_empty_train_set_error(self):
        ds = dataset_from_dense(np.zeros((0, 23), np.float32))
        with pytest.raises(DataError):
            fit_normalization(ds)

    def test_norm_stats_round_trip(self, tmp_path):
        dense = np.random.default_rng(3).uniform(0, 9, (5, 23)).astype(np.float32)
        stats = fit_normalization(dataset_from_dense(dense))
        save_norm_stats(stats, tmp_path / "norm.txt")
        loaded = load_norm_stats(tmp_path / "norm.txt")
        assert loaded.variant == stats.variant
        np.testing.assert_array_equal(loaded.dense_mean, stats.dense_mean)
        np.testing.assert_array_equal(loaded.dense_std, stats.dense_std)
        assert loaded.digest() == stats.digest()


class TestPersistence:
    def make_dataset(self, variant):
        rng = np.random.default_rng(2)
        sensors = [
            SensorRecord(f"L{i}", Location(37.5 + 0.01 * i, -122.2), hour(0), 5.0, 9.0, 15.0, 55.0)
            for i in range(3)
        ]
        stations = []
        for i in range(4):
            loc = Location(37.45 + 0.02 * i, -122.25)
            stations += station_series(
                f"ST{i}", loc,
                [(float(rng.uniform(2, 30)), float(rng.uniform(5, 60)) if i % 2 else None)] * 5,
            )
        return build_dataset(stations, sensors, [], [], variant)

    @pytest.mark.parametrize("variant", ["station", "sensor", "station_and_sensor"])
    def test_save_load_round_trip(self, tmp_path, variant):
        ds = self.make_dataset(variant)
        path = tmp_path / "data.agds"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.variant == ds.variant
        assert loaded.station_ids == ds.station_ids
        assert loaded.station_locs == ds.station_locs
        np.testing.assert_array_equal(loaded.point_station, ds.point_station)
        np.testing.assert_array_equal(loaded.point_hour, ds.point_hour)
        np.testing.assert_array_equal(loaded.dense, ds.dense)
        np.testing.assert_array_equal(loaded.targets, ds.targets)
        np.testing.assert_array_equal(loaded.masks, ds.masks)
        if variant == "station":
            assert loaded.windows is None
        else:
            np.testing.assert_array_equal(loaded.windows, ds.windows)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.agds"
        path.write_bytes(b"NOPE 1\nend_header\n")
        with pytest.raises(DataError):
            load_dataset(path)

    def test_point_accessor(self):
        ds = self.make_dataset("station_and_sensor")
        p = ds.point(0)
        assert p.station_id == ds.station_ids[ds.point_station[0]]
        assert p.features.dense.shape == (33,)
        assert p.target.mask[0] is True


class TestDeriveVariant:
    def test_slices_match_direct_builds(self):
        from datetime import timedelta

        from airgrid.dataset import derive_variant
        from airgrid.ingest import RoadSegment, TrafficObservation

        rng = np.random.default_rng(6)
        stations, sensors, roads, traffic = [], [], [], []
        for i in range(6):
            loc = Location(37.4 + 0.03 * i, -122.3 + 0.02 * i)
            for k in range(4):
                stations.append(StationRecord(
                    f"ST{i}", loc, hour(k),
                    float(rng.uniform(3, 25)),
                    float(rng.uniform(8, 50)) if i % 3 else None,
                ))
        for i in range(5):
            loc = Location(37.42 + 0.025 * i, -122.28)
            for k in range(12):
                sensors.append(SensorRecord(
                    f"LC{i}", loc, hour(0) + timedelta(minutes=20 * k),
                    float(rng.uniform(2, 20)), float(rng.uniform(5, 40)),
                    15.0, 60.0,
                ))
        for i in range(4):
            roads.append(RoadSegment(
                f"RD{i}", Location(37.43 + 0.02 * i, -122.29), 0.4, 4, "major_roads"))
            for k in range(4):
                traffic.append(TrafficObservation(f"RD{i}", hour(k), 3.0))

        full = build_dataset(stations, sensors, roads, traffic, "station_and_sensor")
        for variant in ("station", "sensor"):
            direct = build_dataset(stations, sensors, roads, traffic, variant)
            derived = derive_variant(full, variant)
            np.testing.assert_array_equal(derived.dense, direct.dense)
            np.testing.assert_array_equal(derived.targets, direct.targets)
            if variant == "sensor":
                np.testing.assert_array_equal(derived.windows, direct.windows)
            else:
                assert derived.windows is None
