"""Training loop: Adam, per-epoch cosine decay, best-accuracy checkpointing."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..autograd import NonFiniteError, Tape, Tensor, backward_pass, no_record, softmax_cross_entropy
from ..models import Network, build_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ArrayDataset, BatchLoader, DatasetSource, channel_stats, load_arrays
from .optim import NonFiniteGradient, OptimState, adam_step, cosine_lr

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_acc")
CHECKPOINT_NAME = "best.ckpt"
METRICS_NAME = "metrics.csv"


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float

    def row(self) -> dict:
        return {k: repr(getattr(self, k)) if isinstance(getattr(self, k), float) else getattr(self, k)
                for k in METRIC_FIELDS}


@dataclass
class TrainResult:
    model: Network
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_test_acc: float | None = None
    checkpoint: Path | None = None
    metrics_csv: Path | None = None
    seconds: float = 0.0


def evaluate(model: Network, loader: BatchLoader) -> float:
    """Top-1 accuracy in eval mode (running BN statistics, nothing recorded)."""
    was_training = model.training
    model.eval()
    correct = 0
    with no_record():
        for x, y in loader.epoch(0):
            correct += int((model(Tensor(x)).data.argmax(axis=1) == y).sum())
    model.train(was_training)
    return correct / loader.num_items


def make_loaders(config: RunConfig, eval_batch: int = 500) -> tuple[BatchLoader, BatchLoader]:
    train = load_arrays(DatasetSource(config.dataset_kind, config.dataset_path, "train"))
    test = load_arrays(DatasetSource(config.dataset_kind, config.dataset_path, "test"))
    stats = channel_stats(train.images)
    if config.train_limit is not None:
        train = ArrayDataset(train.images[:config.train_limit], train.labels[:config.train_limit])
    train_loader = BatchLoader(train, config.batch, *stats, shuffle=True,
                               pad_crop=config.pad_crop, flip=config.flip, seed=config.seed)
    return train_loader, BatchLoader(test, eval_batch, *stats)


def _write_metrics(path: Path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for m in metrics:
            writer.writerow(m.row())


def train(config: RunConfig, train_loader: BatchLoader | None = None,
          test_loader: BatchLoader | None = None) -> TrainResult:
    """Train from random init; see :class:`RunConfig` for the knobs.

    Writes ``best.ckpt`` (initial weights first, then whenever test accuracy
    improves) and ``metrics.csv`` (one row per finished epoch) to
    ``config.output_dir``.
    """
    with threadpool_limits(limits=config.threads or 1):
        return _train(config, train_loader, test_loader)


def _train(config: RunConfig, train_loader, test_loader) -> TrainResult:
    start = time.perf_counter()
    if train_loader is None or test_loader is None:
        train_loader, test_loader = make_loaders(config)
    model = build_model(config.model_config(), seed=config.seed)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / CHECKPOINT_NAME
    metrics_csv = out_dir / METRICS_NAME
    meta = {"run": config.to_dict()}
    save_checkpoint(ckpt, model, {**meta, "epoch": 0, "test_acc": None})
    result = TrainResult(model, checkpoint=ckpt, metrics_csv=metrics_csv)
    _write_metrics(metrics_csv, result.metrics)

    params = model.parameters()
    state = OptimState(base_lr=config.lr, weight_decay=config.weight_decay)
    model.train()
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, epoch, config.epochs)
        loss_sum, correct, seen = 0.0, 0, 0
        for step, (x, y) in enumerate(train_loader.epoch(epoch)):
            try:
                with Tape() as tape:
                    logits = model(Tensor(x))
                    loss = softmax_cross_entropy(logits, y)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError(f"loss is {loss.item()}")
                grads = backward_pass(tape, loss, params)
                adam_step(state, params, [grads[p] for p in params], lr)
            except (NonFiniteError, NonFiniteGradient, FloatingPointError) as exc:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch + 1}, step {step}: {exc}; "
                    f"last good checkpoint: {ckpt}", ckpt) from exc
            loss_sum += loss.item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        test_acc = evaluate(model, test_loader)
        m = EpochMetrics(epoch + 1, lr, loss_sum / seen, correct / seen, test_acc)
        result.metrics.append(m)
        _write_metrics(metrics_csv, result.metrics)
        if result.best_test_acc is None or test_acc > result.best_test_acc:
            result.best_test_acc = test_acc
            save_checkpoint(ckpt, model, {**meta, "epoch": epoch + 1, "test_acc": test_acc})
        log.info("epoch %d/%d lr=%.5f loss=%.4f train_acc=%.4f test_acc=%.4f",
                 m.epoch, config.epochs, lr, m.train_loss, m.train_acc, test_acc)
    result.seconds = time.perf_counter() - start
    return result


def load_best(result: TrainResult) -> Network:
    model, _ = load_checkpoint(result.checkpoint)
    return model


def read_metrics(path: str | Path) -> list[EpochMetrics]:
    with open(path, newline="") as f:
        return [EpochMetrics(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                             float(r["train_acc"]), float(r["test_acc"])) for r in csv.DictReader(f)]

