"""Mini-batch training with Adam-style updates and early stopping."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataflow import WindowSet
from .fusion import DTSFormer, StageError
from .numerics import NumericError, as_tensor, backward, zero_grad

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
EVAL_BATCH = 512


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, batch: int, max_grad: float, loss: float):
        self.epoch, self.batch, self.max_grad = epoch, batch, max_grad
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch} (max |grad| {max_grad:.3g})")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    patience: int = 40
    max_epochs: int = 200
    seed: int = 0
    min_delta: float = 1e-6
    loss: str = "mse"

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, patience and max_epochs must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopping_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss

    def to_csv(self, path, include_wallclock: bool = False) -> None:
        """``epoch,train_loss,val_loss,seconds``; seconds stay blank unless requested."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for r in self.records:
                secs = f"{r.seconds:.3f}" if include_wallclock else ""
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), secs])


class AdamState:
    """First/second moment buffers keyed by parameter name, plus the step counter."""

    def __init__(self, named_params):
        self.moments = {
            name: (torch.zeros_like(p, requires_grad=False), torch.zeros_like(p, requires_grad=False))
            for name, p in named_params
        }
        self.t = 0


def optimizer_step(params, grads, moments, lr: float, t: int, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
    """Bias-corrected adaptive-moment update, in place on ``params`` and ``moments``.

    ``moments`` is a list of ``(m, v)`` pairs aligned with ``params``.
    """
    if t < 1:
        raise ValueError("step counter t starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, (m, v) in zip(params, grads, moments):
            if g is None:
                continue
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return params, moments


def _max_grad(params) -> float:
    """Largest gradient entry left from the previous step (NaN before the first)."""
    return max((p.grad.abs().max().item() for p in params if p.grad is not None), default=math.nan)


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def _calendar(data: WindowSet, idx):
    return None if data.calendar is None else data.calendar[idx]


def _mse(model: DTSFormer, data: WindowSet, idx) -> torch.Tensor:
    pred = model(as_tensor(data.history[idx]), _calendar(data, idx))
    return ((pred - as_tensor(data.target[idx])) ** 2).mean()


def dataset_loss(model: DTSFormer, data: WindowSet, batch: int = EVAL_BATCH) -> float:
    """Mean squared error over every target step of ``data``, in the data's units."""
    total = 0.0
    with torch.no_grad():
        for sl in _batches(len(data), batch):
            count = sl.stop - sl.start
            total += _mse(model, data, sl).item() * count
    return total / len(data)


def train(
    model: DTSFormer,
    train_set: WindowSet,
    val_set: WindowSet,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[DTSFormer, TrainHistory]:
    """Fit ``model`` in place and return it holding the best-validation parameters."""
    cfg.validate()
    if not len(train_set) or not len(val_set):
        raise ValueError("training and validation sets must be non-empty")
    if train_set.m != model.config.input_len or train_set.n != model.config.horizon:
        raise ValueError(
            f"data windows (m={train_set.m}, n={train_set.n}) do not match the model "
            f"(input_len={model.config.input_len}, horizon={model.config.horizon})"
        )
    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    params = [p for _, p in named]
    state = AdamState(named)
    moments = [state.moments[k] for k, _ in named]

    history = TrainHistory()
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    started = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        model.train()
        running, seen = 0.0, 0
        for b, sl in enumerate(_batches(len(order), cfg.batch_size)):
            idx = order[sl]
            try:
                loss = _mse(model, train_set, idx)
            except StageError as exc:
                if not isinstance(exc.__cause__, NumericError):
                    raise
                raise TrainingDivergedError(epoch, b, _max_grad(params), math.nan) from exc
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, _max_grad(params), loss.item())
            zero_grad(params)
            backward(loss)
            state.t += 1
            optimizer_step(params, [p.grad for p in params], moments, cfg.learning_rate, state.t)
            running += loss.item() * len(idx)
            seen += len(idx)
        model.eval()
        val = dataset_loss(model, val_set)
        rec = EpochRecord(epoch, running / seen, val, time.perf_counter() - started)
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d train %.5f val %.5f", epoch, rec.train_loss, val)
        if val < best_val - cfg.min_delta:
            best_val = val
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                history.stopping_reason = "patience"
                break
    else:
        history.stopping_reason = "max_epochs"
    model.load_state_dict(best_state)
    model.adam_state = state
    return model, history


@dataclass
class EvalResult:
    mse: float
    predictions: np.ndarray
    targets: np.ndarray


def evaluate(model: DTSFormer, dataset: WindowSet, scaler=None, batch: int = EVAL_BATCH) -> EvalResult:
    """Normalized-space MSE plus predictions/targets mapped back through ``scaler``."""
    if not len(dataset):
        raise ValueError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for sl in _batches(len(dataset), batch):
            preds.append(model(as_tensor(dataset.history[sl]), _calendar(dataset, sl)).numpy())
    model.train(was_training)
    pred = np.concatenate(preds, axis=0)
    mse = float(np.mean((pred - dataset.target) ** 2))
    if scaler is not None:
        return EvalResult(mse, scaler.inverse_transform(pred), scaler.inverse_transform(dataset.target))
    return EvalResult(mse, pred, dataset.target.copy())
