"""Adam, clipping, learning-rate schedules, early stopping, two-stage driver."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .data import Dataset, batches
from .model import Model, set_trainable, weights_from_bytes, weights_to_bytes
from .tensor import NonFiniteError, Rng, Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class PlateauConfig:
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6


@dataclass
class TrainConfig:
    batch_size: int = 8
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-5
    clip_global_norm: float = 1.0
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    decay_rate: float = 1.0
    decay_steps: Optional[int] = None  # None: one epoch of steps
    early_stop_patience: int = 10
    restore_best: bool = True
    max_epochs_stage1: int = 100
    max_epochs_stage2: int = 100
    unfreeze_top_n: int = 59
    seed: int = 0

    def validate(self) -> None:
        rates = [self.stage1_lr, self.stage2_lr, self.clip_global_norm, self.plateau.factor, self.decay_rate]
        if any(not r > 0 for r in rates):
            raise ValueError("learning rates, clip norm, plateau factor and decay rate must be positive")
        if not self.plateau.factor < 1:
            raise ValueError("plateau factor must be < 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ValueError("decay_steps must be positive")
        if self.plateau.patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.max_epochs_stage1 < 0 or self.max_epochs_stage2 < 0:
            raise ValueError("max_epochs must be non-negative")


# -- gradient clipping and Adam ---------------------------------------------

def global_norm(grads: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: Sequence[Tensor], c: float) -> list[Tensor]:
    """Scale all gradients by ``c / max(c, global_norm)``."""
    if not c > 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= c:
        return list(grads)
    scale = c / norm
    return [(g * scale).astype(g.dtype, copy=False) for g in grads]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place.  ``params`` holds trainable tensors only."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown or frozen parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)


# -- schedules --------------------------------------------------------------

class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, lr: float, cfg: PlateauConfig):
        self.lr = lr
        self.cfg = cfg
        self.best = -math.inf
        self.wait = 0

    def step(self, value: float) -> float:
        if value > self.best:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.cfg.patience:
                self.lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
                self.wait = 0
        return self.lr


def plateau_schedule(history: Sequence[float], cfg: PlateauConfig, lr: float) -> float:
    sched = PlateauScheduler(lr, cfg)
    for value in history:
        sched.step(value)
    return sched.lr


def inverse_time_decay(lr0: float, step: int, decay_rate: float, decay_steps: int) -> float:
    if decay_steps <= 0:
        raise ValueError("decay_steps must be positive")
    return lr0 / (1.0 + decay_rate * step / decay_steps)


class EarlyStopping:
    """Track the best monitor value and keep an in-memory weight snapshot of it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: Optional[int] = None
        self.wait = 0
        self.snapshot: Optional[bytes] = None

    def update(self, epoch: int, value: float, model: Model) -> bool:
        """Record one epoch; return True when training should stop."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            self.snapshot = weights_to_bytes(model)
            return False
        self.wait += 1
        return self.wait >= self.patience

    def restore(self, model: Model) -> None:
        if self.snapshot is not None:
            weights_from_bytes(model, self.snapshot)


# -- reports ----------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class StageReport:
    stage: str
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stop_reason: str = "max_epochs"

    @property
    def best_val_acc(self) -> Optional[float]:
        if self.best_epoch is None:
            return None
        return self.epochs[self.best_epoch - 1].val_acc

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["stage", "epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for e in self.epochs:
            w.writerow([self.stage, e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc), repr(e.val_acc)])
        return buf.getvalue()


def write_reports(reports: Sequence[StageReport], path: Union[str, Path]) -> None:
    text = "".join(r.to_csv(header=(i == 0)) for i, r in enumerate(reports))
    if not reports:
        text = StageReport("none").to_csv()
    Path(path).write_text(text, encoding="utf-8")


# -- evaluation helper with a frozen-prefix cache -----------------------------

class _FrozenPrefixCache:
    """Memoise activations below the lowest trainable record for a fixed dataset.

    Valid only while the records below ``start`` are frozen and the input
    stream is augmentation-free, which is the case for validation inside one
    stage.
    """

    def __init__(self, model: Model):
        self.model = model
        self.start = model.lowest_trainable_index()
        self.store: dict[int, Tensor] = {}

    def predict(self, x: Tensor, key: int) -> Tensor:
        m = self.model
        h = self.store.get(key)
        if h is None:
            h = m.run(x, stop=self.start)[-1]
            self.store[key] = h
        for rec in m.records[self.start:]:
            h = rec.forward(h, m.store)
        return h


def accuracy_on(model: Model, ds: Dataset, batch_size: int = 8, cache: Optional[_FrozenPrefixCache] = None) -> float:
    size = model.input_shape[0]
    correct = 0
    for b, (x, y) in enumerate(batches(ds, batch_size, augment_train=False, shuffle=False, size=size)):
        probs = cache.predict(x, b) if cache is not None else model.forward(x, "infer")
        correct += int((np.argmax(probs, axis=1) == y).sum())
    return correct / len(ds)


# -- stage driver -----------------------------------------------------------

def _train_step(model: Model, x: Tensor, y: np.ndarray, state: AdamState, lr: float, clip: float):
    probs = model.forward(x, "train")
    logits = model._cache[-1]
    loss = ops.sparse_ce_loss(logits, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    grads, _ = model.backward_from_logits(ops.sparse_ce_loss_backward(logits, y))
    model.clear_cache()
    names = list(grads)
    clipped = clip_global_norm([grads[n] for n in names], clip)
    params = {n: model.store.tensor(n) for n in model.store.trainable_names()}
    adam_step(params, dict(zip(names, clipped)), state, lr)
    return loss, int((np.argmax(probs, axis=1) == y).sum())


def run_stage(model: Model, train_ds: Dataset, val_ds: Optional[Dataset], cfg: TrainConfig, stage: str,
              log: Optional[Callable[[str], None]] = None,
              on_epoch: Optional[Callable[[EpochLog, Model], None]] = None) -> StageReport:
    """One stage of the protocol: ``train`` (frozen backbone) or ``finetune``.

    Without ``val_ds`` the monitor is the augmentation-free training split.
    ``on_epoch`` sees the model after each epoch, before any restoration.
    """
    cfg.validate()
    if stage not in ("train", "finetune"):
        raise ValueError(f"stage must be train or finetune, got {stage!r}")
    if len(train_ds) == 0:
        raise ValueError("empty training dataset")
    monitor_ds = val_ds if val_ds is not None and len(val_ds) else train_ds.select(range(len(train_ds)), "val")

    if stage == "train":
        set_trainable(model, 0)
        max_epochs = cfg.max_epochs_stage1
        plateau = PlateauScheduler(cfg.stage1_lr, cfg.plateau)
    else:
        set_trainable(model, cfg.unfreeze_top_n)
        max_epochs = cfg.max_epochs_stage2
        plateau = None
    steps_per_epoch = -(-len(train_ds) // cfg.batch_size)
    decay_steps = cfg.decay_steps or steps_per_epoch

    report = StageReport(stage)
    stopper = EarlyStopping(cfg.early_stop_patience)
    state = AdamState()
    base = Rng(cfg.seed).child(f"stage/{stage}")
    cache = _FrozenPrefixCache(model)
    size = model.input_shape[0]
    step = 0
    lr = cfg.stage1_lr if stage == "train" else cfg.stage2_lr

    for epoch in range(1, max_epochs + 1):
        if plateau is None:
            lr = inverse_time_decay(cfg.stage2_lr, step, cfg.decay_rate, decay_steps)
        epoch_lr = lr
        loss_sum = 0.0
        correct = 0
        rng = base.child(f"epoch/{epoch}")
        for x, y in batches(train_ds, cfg.batch_size, rng, augment_train=True, shuffle=True, size=size):
            if plateau is None:
                lr = inverse_time_decay(cfg.stage2_lr, step, cfg.decay_rate, decay_steps)
            try:
                loss, hits = _train_step(model, x, y, state, lr, cfg.clip_global_norm)
            except (DivergenceError, NonFiniteError) as exc:
                raise DivergenceError(f"{stage} stage diverged at epoch {epoch}, step {step}: {exc}") from exc
            loss_sum += loss * len(y)
            correct += hits
            step += 1
        val_acc = accuracy_on(model, monitor_ds, cfg.batch_size, cache)
        entry = EpochLog(epoch, epoch_lr, loss_sum / len(train_ds), correct / len(train_ds), val_acc)
        report.epochs.append(entry)
        if log is not None:
            log(f"[{stage}] epoch {epoch:3d}  lr {entry.lr:.3g}  loss {entry.train_loss:.4f}  "
                f"acc {entry.train_acc:.4f}  val_acc {entry.val_acc:.4f}")
        if on_epoch is not None:
            on_epoch(entry, model)
        if plateau is not None:
            lr = plateau.step(val_acc)
        if stopper.update(epoch, val_acc, model):
            report.stop_reason = "early_stopping"
            break

    report.best_epoch = stopper.best_epoch
    if cfg.restore_best:
        stopper.restore(model)
    return report


def run_two_stage(model: Model, train_ds: Dataset, val_ds: Optional[Dataset], cfg: TrainConfig,
                  log: Optional[Callable[[str], None]] = None) -> tuple[StageReport, StageReport]:
    first = run_stage(model, train_ds, val_ds, cfg, "train", log)
    second = run_stage(model, train_ds, val_ds, cfg, "finetune", log)
    return first, second
