import math

import numpy as np
import pytest

from airgrid.errors import ConfigError
from airgrid.geo import (
    KernelSpec,
    Location,
    SpatialIndex,
    distance_km,
    kernel,
    sensor_density,
)


def brute_force_k_nearest(entries, query, k, exclude=None):
    """Independent oracle: full scan, sort by (distance, id)."""
    scored = [
        (distance_km(query, loc), ident)
        for ident, loc in entries
        if ident != exclude
    ]
    scored.sort()
    return [(ident, d) for d, ident in scored[:k]]


def brute_force_weighted_sum(entries, query, spec, values):
    return sum(
        math.exp(-distance_km(query, loc) / spec.scale_km) * values[ident]
        for ident, loc in entries
    )


class TestLocation:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            Location(91.0, 0.0)
        with pytest.raises(ValueError):
            Location(0.0, -181.0)
        with pytest.raises(ValueError):
            Location(float("nan"), 0.0)

    def test_kernel_spec_positive(self):
        with pytest.raises(ValueError):
            KernelSpec(0.0)
        with pytest.raises(ValueError):
            KernelSpec(-1.0)


class TestDistance:
    def test_identity(self):
        a = Location(34.05, -118.24)
        assert distance_km(a, a) == 0.0

    def test_one_degree_longitude_at_equator(self):
        # Hand derivation: dlat=0, dlon=1, cos(0)=1 -> 111.32 km.
        assert distance_km(Location(0, 0), Location(0, 1)) == pytest.approx(111.32, abs=0.01)

    def test_one_degree_longitude_at_60_north(self):
        # Hand derivation: cos(60 deg) = 0.5 -> 55.66 km.
        assert distance_km(Location(60, 0), Location(60, 1)) == pytest.approx(55.66, abs=0.01)

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a = Location(rng.uniform(-80, 80), rng.uniform(-179, 179))
            b = Location(rng.uniform(-80, 80), rng.uniform(-179, 179))
            d_ab = distance_km(a, b)
            d_ba = distance_km(b, a)
            assert d_ab == pytest.approx(d_ba, rel=1e-12)
            assert d_ab >= 0.0


class TestKernel:
    def test_zero_distance_is_one(self):
        a = Location(10, 10)
        assert kernel(KernelSpec(3.0), a, a) == 1.0

    def test_forced_values(self):
        # 10 km at scale 10 -> e^-1; 5 km at scale 10 -> e^-0.5.
        a = Location(0, 0)
        b10 = Location(10.0 / 111.32, 0)
        b5 = Location(5.0 / 111.32, 0)
        spec = KernelSpec(10.0)
        assert kernel(spec, a, b10) == pytest.approx(math.exp(-1), rel=1e-6)
        assert kernel(spec, a, b5) == pytest.approx(math.exp(-0.5), rel=1e-6)

    def test_strictly_decreasing_in_distance(self):
        a = Location(0, 0)
        spec = KernelSpec(2.0)
        prev = kernel(spec, a, a)
        for step in range(1, 20):
            w = kernel(spec, a, Location(0.01 * step, 0))
            assert w < prev
            prev = w


class TestKNearest:
    def test_single_entry_at_query(self):
        q = Location(40.0, -75.0)
        idx = SpatialIndex([("A", q)])
        assert idx.k_nearest(q, 5) == [("A", 0.0)]

    def test_exclusion_empties_result(self):
        q = Location(40.0, -75.0)
        idx = SpatialIndex([("A", q)])
        assert idx.k_nearest(q, 5, exclude="A") == []

    def test_empty_index(self):
        idx = SpatialIndex([])
        assert idx.k_nearest(Location(0, 0), 3) == []

    def test_matches_brute_force_small(self):
        rng = np.random.default_rng(42)
        entries = [
            (f"E{i}", Location(rng.uniform(37, 38), rng.uniform(-123, -122)))
            for i in range(10)
        ]
        idx = SpatialIndex(entries, cell_km=5.0)
        q = Location(37.5, -122.5)
        got = idx.k_nearest(q, 3)
        want = brute_force_k_nearest(entries, q, 3)
        assert [g[0] for g in got] == [w[0] for w in want]
        np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], rtol=1e-12)

    def test_ties_broken_by_ascending_id(self):
        q = Location(0, 0)
        same = Location(0.1, 0)
        idx = SpatialIndex([("B", same), ("A", same), ("C", same)])
        assert [i for i, _ in idx.k_nearest(q, 2)] == ["A", "B"]

    def test_fewer_entries_than_k(self):
        entries = [("A", Location(1, 1)), ("B", Location(2, 2))]
        idx = SpatialIndex(entries)
        assert len(idx.k_nearest(Location(0, 0), 10)) == 2

    def test_random_sweep_against_brute_force(self):
        rng = np.random.default_rng(123)
        for trial in range(50):
            n = int(rng.integers(1, 40))
            entries = [
                (f"E{i:03d}", Location(rng.uniform(30, 50), rng.uniform(-120, -70)))
                for i in range(n)
            ]
            idx = SpatialIndex(entries, cell_km=float(rng.uniform(1, 500)))
            q = Location(rng.uniform(30, 50), rng.uniform(-120, -70))
            k = int(rng.integers(1, 8))
            got = idx.k_nearest(q, k)
            want = brute_force_k_nearest(entries, q, k)
            assert [g[0] for g in got] == [w[0] for w in want], f"trial {trial}"


class TestWeightedSum:
    def test_all_zero_values(self):
        entries = [(f"E{i}", Location(i * 0.01, 0)) for i in range(5)]
        idx = SpatialIndex(entries)
        assert idx.weighted_sum(Location(0, 0), KernelSpec(10), dict.fromkeys(idx.ids, 0.0)) == 0.0

    def test_entry_at_query_returns_value(self):
        q = Location(12.0, 34.0)
        idx = SpatialIndex([("A", q)])
        assert idx.weighted_sum(q, KernelSpec(1.0), {"A": 4.5}) == pytest.approx(4.5, rel=1e-15)

    def test_missing_value_is_config_error(self):
        idx = SpatialIndex([("A", Location(0, 0))])
        with pytest.raises(ConfigError):
            idx.weighted_sum(Location(0, 0), KernelSpec(1.0), {})

    def test_matches_hand_sum(self):
        rng = np.random.default_rng(5)
        entries = [
            (f"E{i}", Location(rng.uniform(44.9, 45.1), rng.uniform(9.9, 10.1)))
            for i in range(5)
        ]
        values = {f"E{i}": float(rng.normal()) for i in range(5)}
        spec = KernelSpec(7.0)
        q = Location(45.0, 10.0)
        idx = SpatialIndex(entries, cell_km=7.0)
        got = idx.weighted_sum(q, spec, values)
        want = brute_force_weighted_sum(entries, q, spec, values)
        assert got == pytest.approx(want, rel=1e-9)


class TestSensorDensity:
    def test_no_sensors(self):
        assert sensor_density(SpatialIndex([]), Location(0, 0)) == 0.0

    def test_one_sensor_at_query(self):
        q = Location(51.5, -0.1)
        assert sensor_density(SpatialIndex([("S", q)]), q) == pytest.approx(1.0, rel=1e-12)

    def test_three_sensors_at_0_10_20_km(self):
        # Hand sum: 1 + e^-1 + e^-2 = 1.50321 at the 10 km scale.
        q = Location(0, 0)
        entries = [
            ("S0", q),
            ("S1", Location(10.0 / 111.32, 0)),
            ("S2", Location(20.0 / 111.32, 0)),
        ]
        got = sensor_density(SpatialIndex(entries), q)
        assert got == pytest.approx(1.0 + math.exp(-1) + math.exp(-2), rel=1e-6)

    def test_monotone_under_adding_a_sensor(self):
        rng = np.random.default_rng(99)
        q = Location(40, -100)
        entries = []
        prev = 0.0
        for i in range(20):
            entries.append((f"S{i}", Location(rng.uniform(39, 41), rng.uniform(-101, -99))))
            cur = sensor_density(SpatialIndex(entries), q)
            assert cur > prev
            prev = cur
