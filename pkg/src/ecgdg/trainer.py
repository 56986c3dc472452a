"""Training protocol: step LR schedule, Adam, per-epoch validation, early
stopping on validation loss, best-checkpoint retention."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape, adam_step, ops, read_checkpoint, save_checkpoint
from .errors import DivergedLoss, EmptySplit, InvalidConfig, OutOfRange, ShapeMismatch
from .model import ModelGraph, predict
from .rng import substream

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 24
    lr_schedule: str = "step"
    early_stop_patience: int = 20
    seed: int = 0
    deterministic: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be positive")
        if not 1 <= self.lr_decay_epoch <= self.epochs:
            raise InvalidConfig("lr_decay_epoch must lie within [1, epochs]")
        if self.early_stop_patience < 1:
            raise InvalidConfig("early_stop_patience must be >= 1")
        if self.lr_schedule not in ("step", "exponential"):
            raise InvalidConfig("lr_schedule must be step or exponential")
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based epoch.

    ``step``: lr before ``lr_decay_epoch``, lr * factor from it onward.
    ``exponential``: one further factor per epoch past the decay epoch.
    """
    if not 1 <= epoch <= cfg.epochs:
        raise OutOfRange(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch < cfg.lr_decay_epoch:
        return cfg.lr
    if cfg.lr_schedule == "step":
        return cfg.lr * cfg.lr_decay_factor
    return cfg.lr * cfg.lr_decay_factor ** (epoch - cfg.lr_decay_epoch + 1)


@dataclass
class EarlyStopping:
    """Strict-improvement monitor on a lower-is-better metric."""

    patience: int
    best: float = math.inf
    best_epoch: int = 0
    since_improvement: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True if it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.since_improvement = value, epoch, 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


@dataclass
class RunState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    stopped_early: bool = False

    def log_text(self, include_timing: bool = False) -> str:
        """CSV rendering of the epoch log. Without timing it is reproducible."""
        cols = LOG_COLUMNS if include_timing else LOG_COLUMNS[:-1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.log:
            writer.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Dataset:
    """Preprocessed signals (n, leads, L) with aligned multi-hot labels (n, C)."""

    x: np.ndarray
    y: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ShapeMismatch(f"{len(self.x)} signals vs {len(self.y)} label rows")
        if not self.ids:
            self.ids = tuple(str(i) for i in range(len(self.x)))

    def __len__(self):
        return len(self.x)


def set_deterministic(flag: bool) -> None:
    """Pin BLAS to one thread so float reductions keep a fixed order."""
    if flag:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)


def _batch_loss(model: ModelGraph, x, y, mode: str, dropout_key=None):
    logits = model.forward(x, mode, dropout_key=dropout_key)
    return logits, ops.head_loss(logits, y, model.cfg.loss_mode)


def dataset_loss(model: ModelGraph, data: Dataset, batch_size: int = 64) -> float:
    """Mean per-record loss in eval mode."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        xb = data.x[start:start + batch_size]
        _, loss = _batch_loss(model, xb, data.y[start:start + batch_size], "eval")
        total += loss.item() * len(xb)
    return total / len(data)


def train(model: ModelGraph, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          run_dir=None, on_epoch=None) -> RunState:
    """Train in place; on return ``model`` holds the best-validation weights.

    With ``run_dir``, ``best.ckpt`` is rewritten on every validation
    improvement and ``log.csv`` after every epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplit("train and validation sets must be non-empty")
    set_deterministic(cfg.deterministic)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    state = RunState()
    stopper = EarlyStopping(cfg.early_stop_patience)
    best_snapshot = model.params.snapshot()
    n = len(train_set)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = substream(cfg.seed, "shuffle", epoch).permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.params.zero_grad()
            with Tape() as tape:
                _, loss = _batch_loss(model, train_set.x[idx], train_set.y[idx], "train",
                                      dropout_key=step)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}, step {step}")
            tape.backward(loss, model.params)
            adam_step(model.params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            running += value * len(idx)
            step += 1
        train_loss = running / n
        val_loss = dataset_loss(model, val_set, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        improved = stopper.update(epoch, val_loss)
        if improved:
            best_snapshot = model.params.snapshot()
            if run_dir is not None:
                path = save_checkpoint(model.params, run_dir / "best.ckpt")
                if path not in state.checkpoints:
                    state.checkpoints.append(path)
        state.epoch = epoch
        state.best_val_loss = stopper.best
        state.best_epoch = stopper.best_epoch
        state.epochs_since_improvement = stopper.since_improvement
        state.log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                          "lr": lr, "seconds": round(time.perf_counter() - t0, 3)})
        logger.info("epoch %d train_loss %.5f val_loss %.5f lr %g%s", epoch, train_loss,
                    val_loss, lr, " *" if improved else "")
        if run_dir is not None:
            (run_dir / "log.csv").write_text(state.log_text(include_timing=True))
        if on_epoch is not None:
            on_epoch(state)
        if stopper.should_stop:
            state.stopped_early = epoch < cfg.epochs
            break
    model.params.restore(best_snapshot)
    return state


@dataclass
class EvalResult:
    predictions: np.ndarray
    loss: float
    logits: np.ndarray


def evaluate_split(model: ModelGraph, data: Dataset, checkpoint=None,
                   head_mode: Optional[str] = None, threshold: Optional[float] = None,
                   batch_size: int = 64) -> EvalResult:
    """Eval-mode predictions (aligned with the label order) and mean loss."""
    if len(data) == 0:
        raise EmptySplit("cannot evaluate an empty record set")
    if checkpoint is not None:
        model.params.restore(read_checkpoint(checkpoint))
    head_mode = head_mode or model.cfg.head_mode
    threshold = model.cfg.decision_threshold if threshold is None else threshold
    loss_mode = "softmax_ce" if head_mode == "softmax" else "sigmoid_bce"
    logits, total = [], 0.0
    for start in range(0, len(data), batch_size):
        xb, yb = data.x[start:start + batch_size], data.y[start:start + batch_size]
        out = model.forward(xb, "eval")
        if loss_mode == "softmax_ce" and np.any(yb.sum(axis=1) == 0):
            total = math.nan
        else:
            total += ops.head_loss(out, yb, loss_mode).item() * len(xb)
        logits.append(out.data)
    z = np.concatenate(logits, axis=0)
    return EvalResult(predict(z, head_mode, threshold), total / len(data), z)
