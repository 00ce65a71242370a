"""Concentration rasters over a bounding box at a fixed hour.

Cells are square in degrees (step = cell_size_m / 111320, the meters in one
degree of latitude), so the ESRI ASCII output keeps its single-cellsize
contract; the physical east-west width shrinks by cos(latitude) as on any
plate carree grid. Each cell value is the model prediction at the cell
center, nothing else: no smoothing, no interpolation, so the raster is a
pure probe of the model's spatial structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import DataError
from .evaluation import POLLUTANTS
from .features import FeatureBuilder
from .geo import Location
from .network import Model, predict_vector

METERS_PER_DEGREE = 111320.0
MIN_CELL_M = 10.0
MAX_CELL_M = 5000.0
MAX_CELLS = 4_000_000
NODATA = -9999


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    hour: datetime
    cell_size_m: float = 50.0
    pollutants: tuple[str, ...] = POLLUTANTS

    def __post_init__(self):
        if self.lat_min >= self.lat_max or self.lon_min >= self.lon_max:
            raise ValueError("grid bounding box not well ordered")
        if not MIN_CELL_M <= self.cell_size_m <= MAX_CELL_M:
            raise ValueError(f"cell size {self.cell_size_m} m outside [{MIN_CELL_M}, {MAX_CELL_M}]")
        if unknown := set(self.pollutants) - set(POLLUTANTS):
            raise ValueError(f"unknown pollutants {sorted(unknown)}")
        if self.n_rows * self.n_cols > MAX_CELLS:
            raise ValueError(f"grid of {self.n_rows}x{self.n_cols} cells exceeds {MAX_CELLS}")

    @property
    def step_deg(self) -> float:
        return self.cell_size_m / METERS_PER_DEGREE

    @property
    def n_rows(self) -> int:
        return max(1, math.ceil((self.lat_max - self.lat_min) / self.step_deg))

    @property
    def n_cols(self) -> int:
        return max(1, math.ceil((self.lon_max - self.lon_min) / self.step_deg))


@dataclass
class Raster:
    """Row-major concentrations; row 0 is the southernmost row."""

    pollutant: str
    lat_min: float
    lon_min: float
    step_deg: float
    cell_size_m: float
    values: np.ndarray  # (n_rows, n_cols) float64

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def cell_center(self, row: int, col: int) -> Location:
        return Location(
            self.lat_min + (row + 0.5) * self.step_deg,
            self.lon_min + (col + 0.5) * self.step_deg,
        )


def render(model: Model, builder: FeatureBuilder, spec: GridSpec) -> dict[str, Raster]:
    """Predict at every cell center (no station exclusion: prediction mode).

    Fails when the requested hour is entirely absent from the sources.
    """
    if not builder.covers(spec.hour):
        raise DataError(f"render: hour {spec.hour.isoformat()} absent from all sources")
    rasters = {
        p: Raster(p, spec.lat_min, spec.lon_min, spec.step_deg, spec.cell_size_m,
                  np.zeros((spec.n_rows, spec.n_cols)))
        for p in spec.pollutants
    }
    for row in range(spec.n_rows):
        lat = spec.lat_min + (row + 0.5) * spec.step_deg
        for col in range(spec.n_cols):
            lon = spec.lon_min + (col + 0.5) * spec.step_deg
            fv = builder.build(Location(lat, lon), spec.hour, model.config.variant)
            pm25, pm10 = predict_vector(model, fv)
            pair = {"pm25": pm25, "pm10": pm10}
            for p in spec.pollutants:
                rasters[p].values[row, col] = pair[p]
    for raster in rasters.values():
        if not np.isfinite(raster.values).all() or (raster.values < 0).any():
            raise DataError("render: raster contains non-finite or negative values")
    return rasters


@dataclass(frozen=True)
class RasterComparison:
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float
    variability_ratio: float  # std_b / std_a


def raster_stats(a: Raster, b: Raster) -> RasterComparison:
    """Summary statistics quantifying how much more spatial structure raster
    ``b`` carries than raster ``a``."""
    if a.values.shape != b.values.shape or a.step_deg != b.step_deg:
        raise DataError("raster_stats: grids do not match")
    std_a = float(a.values.std())
    std_b = float(b.values.std())
    ratio = math.inf if std_a == 0 and std_b > 0 else (1.0 if std_a == std_b == 0 else std_b / std_a)
    return RasterComparison(float(a.values.mean()), float(b.values.mean()), std_a, std_b, ratio)


def write_raster_csv(raster: Raster, path):
    """lat,lon,value rows at cell centers, south-to-north."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("lat,lon,value\n")
        for row in range(raster.n_rows):
            lat = raster.lat_min + (row + 0.5) * raster.step_deg
            for col in range(raster.n_cols):
                lon = raster.lon_min + (col + 0.5) * raster.step_deg
                f.write(f"{lat!r},{lon!r},{float(raster.values[row, col])!r}\n")


def write_raster_asc(raster: Raster, path):
    """ESRI ASCII grid; rows written north-to-south as the format requires."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"ncols {raster.n_cols}\n")
        f.write(f"nrows {raster.n_rows}\n")
        f.write(f"xllcorner {raster.lon_min!r}\n")
        f.write(f"yllcorner {raster.lat_min!r}\n")
        f.write(f"cellsize {raster.step_deg!r}\n")
        f.write(f"NODATA_value {NODATA}\n")
        for row in range(raster.n_rows - 1, -1, -1):
            f.write(" ".join(repr(v) for v in raster.values[row].tolist()) + "\n")


def write_raster_pgm(raster: Raster, path):
    """8-bit grayscale preview scaled to [min, max], north at the top."""
    lo = float(raster.values.min())
    hi = float(raster.values.max())
    if hi > lo:
        scaled = np.round((raster.values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros_like(raster.values, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5 {raster.n_cols} {raster.n_rows} 255\n".encode("ascii"))
        f.write(scaled[::-1].tobytes())
