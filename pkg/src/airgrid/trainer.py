"""Mini-batch training loop: seeded shuffling, Adam updates, per-epoch
checkpoints, and a final evaluation pass.

Normalization statistics are fitted on the training points only and travel
with the model; evaluation data never contributes to them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, NormStats, fit_normalization, normalize_dense, normalize_windows
from .errors import NumericalError
from .evaluation import MetricRow, compute_metrics
from .network import (
    AdamState,
    Model,
    ModelConfig,
    adam_step,
    backward,
    forward,
    init_weights,
    msle_loss,
    predict,
    save_model,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 0.001
    shuffle_seed: int = 0
    checkpoint_dir: str | None = None
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainReport:
    epoch_train_msle: list[float] = field(default_factory=list)
    eval_rows: list[MetricRow] = field(default_factory=list)
    steps: int = 0
    skipped_batches: int = 0
    wall_time_s: float = 0.0
    shuffle_seed: int = 0

    def summary(self) -> str:
        lines = [f"steps {self.steps}  skipped_batches {self.skipped_batches}  "
                 f"wall_time_s {self.wall_time_s:.2f}  shuffle_seed {self.shuffle_seed}"]
        for i, l in enumerate(self.epoch_train_msle):
            lines.append(f"epoch {i + 1} train_msle {l:.6f}")
        for row in self.eval_rows:
            lines.append(
                f"eval {row.pollutant} {row.model} msle {row.msle:.6f} mae {row.mae:.6f} n {row.count}"
            )
        return "\n".join(lines)


def train(
    model_config: ModelConfig,
    train_ds: Dataset,
    eval_ds: Dataset | None,
    config: TrainConfig,
    norm: NormStats | None = None,
) -> tuple[Model, TrainReport]:
    """Train a fresh model; returns the weights after the last step plus a
    report with per-epoch training MSLE and final evaluation metrics.

    A non-finite batch loss aborts training; the per-epoch checkpoint (when a
    checkpoint directory is configured) is the last good state.
    """
    started = time.perf_counter()
    if norm is None:
        norm = fit_normalization(train_ds)
    dense = normalize_dense(train_ds.dense, norm)
    windows = None
    if model_config.has_branch:
        windows = normalize_windows(train_ds.windows, norm)
    targets = train_ds.targets.astype(np.float64)
    masks = train_ds.masks

    weights = init_weights(model_config)
    state = AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.shuffle_seed)
    report = TrainReport(shuffle_seed=config.shuffle_seed)
    n = len(train_ds)
    last_checkpoint: Path | None = None

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_sq = 0.0
        epoch_pairs = 0
        for start in range(0, n, config.batch_size):
            rows = perm[start : start + config.batch_size]
            m = int(masks[rows].sum())
            if m == 0:
                report.skipped_batches += 1
                continue
            out, cache = forward(
                weights, model_config,
                None if windows is None else windows[rows], dense[rows],
            )
            loss, dpred = msle_loss(out, targets[rows], masks[rows])
            if not np.isfinite(loss):
                where = last_checkpoint if last_checkpoint else "none saved"
                raise NumericalError(
                    f"training diverged at step {report.steps + 1}; last good checkpoint: {where}"
                )
            grads = backward(weights, model_config, cache, dpred)
            weights, state = adam_step(weights, grads, state)
            report.steps += 1
            epoch_sq += loss * m
            epoch_pairs += m
        report.epoch_train_msle.append(epoch_sq / max(epoch_pairs, 1))
        if config.checkpoint_dir is not None:
            last_checkpoint = Path(config.checkpoint_dir) / f"checkpoint_epoch{epoch + 1}.agm"
            save_model(Model(model_config, weights, norm), last_checkpoint)

    model = Model(model_config, weights, norm)
    if eval_ds is not None and len(eval_ds):
        preds = predict(model, eval_ds.windows, eval_ds.dense)
        report.eval_rows = compute_metrics(preds, eval_ds.targets, eval_ds.masks)
    report.wall_time_s = time.perf_counter() - started
    return model, report
