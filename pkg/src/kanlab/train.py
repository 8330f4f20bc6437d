"""Plain SGD training loop, evaluation, and inference helpers."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import Dataset
from .metrics import ConfusionMatrix
from .rng import derive_seed
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-4
    epochs: int = 50
    seed: int = 0
    shuffle: bool = True
    early_stop_patience: int | None = None

    def validate(self, needs_pairs: bool = False) -> "TrainConfig":
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < (2 if needs_pairs else 1):
            raise ValueError(f"batch_size {self.batch_size} too small"
                             + (" for batch-norm training" if needs_pairs else ""))
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        return self


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for i in range(self.epochs_run):
            w.writerow([i + 1, repr(self.train_loss[i]), repr(self.train_acc[i]),
                        repr(self.val_loss[i]), repr(self.val_acc[i])])
        return buf.getvalue()


def sgd_step(params, lr: float, weight_decay: float) -> None:
    """theta <- theta - lr * (grad + weight_decay * theta); missing grads count as zero."""
    for p in params:
        g = p.grad if p.grad is not None else 0.0
        p.data = (p.data - lr * (g + weight_decay * p.data)).astype(p.dtype, copy=False)


def batches(n: int, batch_size: int, order: np.ndarray, min_batch: int = 1):
    """Index slices of ``order``; a trailing batch smaller than ``min_batch`` joins the previous one."""
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < min_batch:
        starts.pop()
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:e]


def _param_norms(model) -> str:
    return ", ".join(f"{n}={float(np.linalg.norm(p.data)):.4g}" for n, p in model.named_parameters())


def train(model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, on_epoch=None):
    """Train ``model`` in place and return ``(model, report)``.

    The returned model holds the parameters of the epoch with the best
    validation accuracy (earliest on ties).
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    for name, ds in (("train", train_ds), ("val", val_ds)):
        if ds.labels.max() >= model.num_classes:
            raise ValueError(f"{name} labels exceed the model's {model.num_classes} classes")
    needs_pairs = getattr(model, "has_batch_norm", False)
    cfg.validate(needs_pairs=needs_pairs and len(train_ds) >= 2)
    dtype = model.parameters()[0].dtype
    params = model.parameters()
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    report = TrainReport()
    best_acc, best_state = -1.0, None
    best_val_loss, stale = math.inf, 0
    t0 = time.perf_counter()
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        model.train()
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum, correct = 0.0, 0
        for bi, idx in enumerate(batches(n, cfg.batch_size, order, 2 if needs_pairs else 1)):
            x = Tensor(train_ds.images[idx].astype(dtype, copy=False))
            y = train_ds.labels[idx]
            model.zero_grad()
            logits = model(x)
            loss = ops.cross_entropy(logits, y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss {lv} at epoch {epoch + 1}, batch {bi}; "
                                       f"parameter norms: {_param_norms(model)}")
            loss.backward()
            sgd_step(params, cfg.lr, cfg.weight_decay)
            loss_sum += lv * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        vloss, vcm = evaluate(model, val_ds, cfg.batch_size)
        vacc = float(np.trace(vcm.counts) / vcm.total)
        report.train_loss.append(loss_sum / n)
        report.train_acc.append(correct / n)
        report.val_loss.append(vloss)
        report.val_acc.append(vacc)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f", epoch + 1,
                 loss_sum / n, vloss, vacc)
        if on_epoch is not None:
            on_epoch(epoch, report)
        if vacc > best_acc:
            best_acc, report.best_epoch = vacc, epoch
            best_state = {k: v.copy() for k, v in model.state_arrays()}
        if cfg.early_stop_patience is not None:
            if vloss < best_val_loss:
                best_val_loss, stale = vloss, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if best_state is not None:
        model.load_arrays(best_state)
    model.eval()
    report.wall_time = time.perf_counter() - t0
    return model, report


def predict_logits(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode logits for a stack of images."""
    model.eval()
    dtype = model.parameters()[0].dtype
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model(Tensor(images[s:s + batch_size].astype(dtype, copy=False))).data)
    return np.concatenate(out, axis=0)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(model, ds: Dataset, batch_size: int = 64) -> tuple[float, ConfusionMatrix]:
    """Mean cross-entropy and confusion matrix over ``ds`` in inference mode."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, ds.images, batch_size)
    with no_grad():
        loss = ops.cross_entropy(Tensor(logits.astype(np.float64)), ds.labels).item()
    preds = logits.argmax(axis=1)
    return loss, ConfusionMatrix.from_predictions(ds.labels, preds, model.num_classes)
