"""Geographic primitives: locations, the exponential distance kernel, and a
grid-backed spatial index for k-nearest queries and kernel-weighted sums.

Distances are planar kilometers from a local equirectangular projection
(latitude degrees scaled by 111.32 km, longitude degrees scaled by the cosine
of the mean latitude of the pair). This is accurate at city/regional scale and
keeps every distance a cheap, deterministic closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KM_PER_DEGREE = 111.32


@dataclass(frozen=True)
class Location:
    """A geographic point in decimal degrees (WGS84-style lat/lon)."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinates: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class KernelSpec:
    """Exponential distance-decay kernel with scale ``scale_km`` (kilometers)."""

    scale_km: float

    def __post_init__(self):
        if not (math.isfinite(self.scale_km) and self.scale_km > 0):
            raise ValueError(f"kernel scale must be positive and finite: {self.scale_km}")


def distance_km(a: Location, b: Location) -> float:
    """Planar distance between two locations in kilometers.

    Equirectangular projection: dy = dlat * 111.32, dx = dlon * cos(mean lat)
    * 111.32. Symmetric, non-negative, zero iff the points coincide.
    """
    dy = (b.lat - a.lat) * KM_PER_DEGREE
    dx = (b.lon - a.lon) * math.cos(math.radians((a.lat + b.lat) * 0.5)) * KM_PER_DEGREE
    return math.hypot(dx, dy)


def distances_km(lat: float, lon: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized :func:`distance_km` from one point to many."""
    dy = (lats - lat) * KM_PER_DEGREE
    dx = (lons - lon) * np.cos(np.radians((lats + lat) * 0.5)) * KM_PER_DEGREE
    return np.hypot(dx, dy)


def kernel(spec: KernelSpec, a: Location, b: Location) -> float:
    """Exponential kernel weight exp(-distance/scale), in (0, 1]."""
    return math.exp(-distance_km(a, b) / spec.scale_km)


# Kernel weights below this threshold may be skipped by accelerated sums; the
# induced error is far below the 1e-9 relative tolerance the index is held to.
WEIGHT_CUTOFF = 1e-12


class SpatialIndex:
    """Immutable uniform-grid index over (id, Location) entries.

    Cells are sized ``cell_km`` in both axes. Queries fall back to exact
    per-pair distances; the grid only prunes candidates, so results are
    identical to a brute-force scan. Safe for concurrent read-only use.
    """

    def __init__(self, entries, cell_km: float = 10.0):
        entries = list(entries)
        if cell_km <= 0:
            raise ValueError(f"cell_km must be positive: {cell_km}")
        self.ids = [e[0] for e in entries]
        self.lats = np.array([e[1].lat for e in entries], dtype=np.float64)
        self.lons = np.array([e[1].lon for e in entries], dtype=np.float64)
        self.cell_km = float(cell_km)
        # Longitude cells use the cosine at the entries' mean latitude; the
        # pruning bound below compensates with the most conservative cosine.
        mid_lat = float(np.mean(self.lats)) if entries else 0.0
        self._dlat_deg = cell_km / KM_PER_DEGREE
        self._dlon_deg = cell_km / (KM_PER_DEGREE * max(math.cos(math.radians(mid_lat)), 1e-3))
        self._cells: dict[tuple[int, int], list[int]] = {}
        for i in range(len(entries)):
            self._cells.setdefault(self._cell_of(self.lats[i], self.lons[i]), []).append(i)
        if entries:
            max_abs_lat = float(np.max(np.abs(self.lats)))
            self._min_cos = max(math.cos(math.radians(min(max_abs_lat + 1e-9, 90.0))), 1e-6)
            cis = [c[0] for c in self._cells]
            cjs = [c[1] for c in self._cells]
            self._cell_bounds = (min(cis), max(cis), min(cjs), max(cjs))
        else:
            self._min_cos = 1e-6
            self._cell_bounds = (0, 0, 0, 0)

    def __len__(self) -> int:
        return len(self.ids)

    def _cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        return (int(math.floor(lat / self._dlat_deg)), int(math.floor(lon / self._dlon_deg)))

    def _ring_lower_bound_km(self, ring: int, query: Location) -> float:
        """Conservative lower bound on the distance from ``query`` to any
        point in a cell at Chebyshev ring ``ring`` from the query's cell."""
        if ring <= 1:
            return 0.0
        cos_q = max(math.cos(math.radians(query.lat)), self._min_cos)
        min_cos = min(cos_q, self._min_cos)
        step = min(self._dlat_deg, self._dlon_deg * min_cos) * KM_PER_DEGREE
        return (ring - 1) * step

    def _ring_cells(self, center: tuple[int, int], ring: int):
        ci, cj = center
        if ring == 0:
            yield (ci, cj)
            return
        for dj in range(-ring, ring + 1):
            yield (ci - ring, cj + dj)
            yield (ci + ring, cj + dj)
        for di in range(-ring + 1, ring):
            yield (ci + di, cj - ring)
            yield (ci + di, cj + ring)

    def k_nearest(self, query: Location, k: int, exclude=None) -> list[tuple[object, float]]:
        """The k nearest entries to ``query`` as (id, distance_km), ascending
        by distance with ties broken by ascending id.

        ``exclude`` drops one id from consideration. Returns fewer than k
        items when the index is smaller; an empty index yields an empty list.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1: {k}")
        if not self.ids:
            return []
        center = self._cell_of(query.lat, query.lon)
        best: list[tuple[float, object]] = []
        kth = math.inf
        ring = 0
        max_ring = self._max_ring(center)
        while ring <= max_ring:
            if self._ring_lower_bound_km(ring, query) > kth:
                break
            for cell in self._ring_cells(center, ring):
                for i in self._cells.get(cell, ()):
                    if exclude is not None and self.ids[i] == exclude:
                        continue
                    d = distance_km(query, Location(self.lats[i], self.lons[i]))
                    best.append((d, self.ids[i]))
            if len(best) >= k:
                best.sort()
                kth = best[min(k, len(best)) - 1][0]
            ring += 1
        best.sort()
        return [(ident, d) for d, ident in best[:k]]

    def _max_ring(self, center: tuple[int, int]) -> int:
        gi_min, gi_max, gj_min, gj_max = self._cell_bounds
        return max(abs(gi_min - center[0]), abs(gi_max - center[0]),
                   abs(gj_min - center[1]), abs(gj_max - center[1]))

    def weighted_sum(self, query: Location, spec: KernelSpec, values: dict) -> float:
        """Sum of kernel(query, entry) * values[id] over all entries.

        Entries whose kernel weight falls below ``WEIGHT_CUTOFF`` may be
        skipped. Every indexed id must have a value.
        """
        if not self.ids:
            return 0.0
        # Radius beyond which weights drop under the cutoff.
        radius_km = spec.scale_km * math.log(1.0 / WEIGHT_CUTOFF)
        center = self._cell_of(query.lat, query.lon)
        total = 0.0
        ring = 0
        max_ring = self._max_ring(center)
        while ring <= max_ring:
            if self._ring_lower_bound_km(ring, query) > radius_km:
                break
            for cell in self._ring_cells(center, ring):
                for i in self._cells.get(cell, ()):
                    ident = self.ids[i]
                    if ident not in values:
                        raise ConfigError(f"weighted_sum: no value for indexed id {ident!r}")
                    d = distance_km(query, Location(self.lats[i], self.lons[i]))
                    total += math.exp(-d / spec.scale_km) * values[ident]
            ring += 1
        return total


SENSOR_DENSITY_KERNEL = KernelSpec(scale_km=10.0)


def sensor_density(index: SpatialIndex, query: Location) -> float:
    """Kernel-weighted count of sensors around ``query`` (10 km scale)."""
    ones = dict.fromkeys(index.ids, 1.0)
    return index.weighted_sum(query, SENSOR_DENSITY_KERNEL, ones)
