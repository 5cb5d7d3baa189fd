"""Mini-batch training over plain or keyed datasets.

A keyed trainset is consumed as one pool: the base and keyed parts are
concatenated and shuffled together every epoch. Per-task accuracy in the
history is measured on the training batches against the labels being fitted
(for keyed data that includes the randomized ones), so it directly tracks
what the optimizer sees. Keyed training conventionally gets half the
baseline epoch budget since the pool is one-plus-keys times larger.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mtk.build import KeyedTrainset
from mtk.data import MultiTaskDataset
from mtk.errors import MTKError
from mtk.nn import ModelParams, ModelSpec, init_params, make_optimizer, optimizer_step
from mtk.nn.loss import _loss_grad_stats

DEFAULT_BASELINE_EPOCHS = 15


def keyed_epochs(baseline_epochs: int) -> int:
    return max(1, baseline_epochs // 2)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = DEFAULT_BASELINE_EPOCHS
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise MTKError("need at least one epoch")
        if self.batch_size < 1:
            raise MTKError("batch size must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: tuple[float, ...]
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def final_loss(self) -> float:
        return self.epochs[-1].loss

    def csv_text(self) -> str:
        """Deterministic CSV: epoch, loss, one accuracy column per task.

        Wall-clock timings stay out of the file so identical runs produce
        identical bytes.
        """
        n_tasks = len(self.epochs[0].accuracy) if self.epochs else 0
        header = "epoch,loss," + ",".join(f"acc_task_{t}" for t in range(n_tasks))
        lines = [header]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.loss!r}," + ",".join(repr(a) for a in e.accuracy)
            )
        return "\n".join(lines) + "\n"

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())


def _as_parts(data: KeyedTrainset | MultiTaskDataset) -> list[MultiTaskDataset]:
    if isinstance(data, KeyedTrainset):
        return data.datasets()
    if isinstance(data, MultiTaskDataset):
        return [data]
    raise MTKError(f"cannot train on {type(data).__name__}")


def train(
    spec: ModelSpec,
    data: KeyedTrainset | MultiTaskDataset,
    cfg: TrainConfig,
) -> tuple[ModelParams, TrainHistory]:
    """Train a fresh model; returns final parameters and per-epoch history."""
    parts = _as_parts(data)
    first = parts[0]
    if spec.input_shape != first.image_shape:
        raise MTKError(
            f"model input {spec.input_shape} does not match images {first.image_shape}"
        )
    if spec.heads != tuple(t.n_classes for t in first.tasks):
        raise MTKError("model heads do not match the task class counts")
    for p in parts[1:]:
        if p.image_shape != first.image_shape or p.tasks != first.tasks:
            raise MTKError("trainset parts disagree on geometry or tasks")

    total = sum(p.n_samples for p in parts)
    part_id = np.concatenate(
        [np.full(p.n_samples, i, dtype=np.int64) for i, p in enumerate(parts)]
    )
    row = np.concatenate([np.arange(p.n_samples, dtype=np.int64) for p in parts])

    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(spec, init_seq)
    state = make_optimizer(
        cfg.optimizer, cfg.lr, momentum=cfg.momentum,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
    )
    shuffle_rng = np.random.default_rng(shuffle_seq)

    n_tasks = len(first.tasks)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(total) if cfg.shuffle else np.arange(total)
        loss_sum = 0.0
        correct = np.zeros(n_tasks, dtype=np.int64)
        for start in range(0, total, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = _gather(parts, part_id[idx], row[idx])
            loss, grads, batch_correct = _loss_grad_stats(params, x, y)
            optimizer_step(params, grads, state)
            loss_sum += loss * idx.size
            correct += batch_correct
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                loss=loss_sum / total,
                accuracy=tuple(float(c) / total for c in correct),
                seconds=time.perf_counter() - t0,
            )
        )
    return params, history


def train_baseline(
    spec: ModelSpec, ds: MultiTaskDataset, cfg: TrainConfig
) -> tuple[ModelParams, TrainHistory]:
    """Plain supervised training on the unmodified dataset."""
    return train(spec, ds, cfg)


def _gather(
    parts: Sequence[MultiTaskDataset], pid: np.ndarray, row: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if len(parts) == 1:
        return parts[0].samples[row], parts[0].labels[row]
    first = parts[0]
    x = np.empty((pid.size,) + first.image_shape, dtype=np.float32)
    y = np.empty((pid.size, len(first.tasks)), dtype=np.int64)
    for i, p in enumerate(parts):
        m = pid == i
        if m.any():
            x[m] = p.samples[row[m]]
            y[m] = p.labels[row[m]]
    return x, y
