"""Figure rendering for the report paths: metric bars, density-batch curves,
and raster heatmaps. Every function writes a PNG next to the delimited
output; nothing is shown interactively."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import DensityBatchReport, MetricRow, POLLUTANTS
from .mapgen import Raster


def plot_metrics(rows: list[MetricRow], path):
    """Grouped MSLE bars per pollutant and model."""
    pollutants = [p for p in POLLUTANTS if any(r.pollutant == p for r in rows)]
    models = []
    for row in rows:
        if row.model not in models:
            models.append(row.model)
    fig, axes = plt.subplots(1, max(len(pollutants), 1), figsize=(5 * max(len(pollutants), 1), 4))
    if len(pollutants) <= 1:
        axes = [axes]
    for ax, pollutant in zip(axes, pollutants):
        values = []
        for model in models:
            match = [r.msle for r in rows if r.pollutant == pollutant and r.model == model]
            values.append(match[0] if match else np.nan)
        ax.bar(range(len(models)), values, color="steelblue")
        ax.set_xticks(range(len(models)))
        ax.set_xticklabels(models, rotation=20, ha="right", fontsize=8)
        ax.set_ylabel("MSLE")
        ax.set_title(pollutant)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_density_batches(report: DensityBatchReport, path, pollutant: str = "all"):
    """Evaluation MSLE per density batch, one line per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [b.mean_density for b in report.batches]
    for model in report.models:
        y = [b.msle[model][pollutant] for b in report.batches]
        ax.plot(x, y, marker="o", label=model)
    ax.set_xlabel("mean low-cost sensor density")
    ax.set_ylabel(f"MSLE ({pollutant})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_raster(raster: Raster, path, title: str | None = None):
    """Heatmap of a concentration raster, north at the top."""
    fig, ax = plt.subplots(figsize=(6, 5))
    extent = (
        raster.lon_min,
        raster.lon_min + raster.n_cols * raster.step_deg,
        raster.lat_min,
        raster.lat_min + raster.n_rows * raster.step_deg,
    )
    image = ax.imshow(raster.values[::-1], extent=extent, cmap="inferno", aspect="auto")
    fig.colorbar(image, ax=ax, label=f"{raster.pollutant} (ug/m3)")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(title or raster.pollutant)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
