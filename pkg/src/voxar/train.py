"""Adam optimization and the volume-by-volume training loop.

Batch size is one volume, so gradients are per-volume with no
accumulation. Early stopping tracks the validation NLL: training ends
when the epoch budget runs out or the configured number of epochs passes
without a new validation minimum, and the returned parameters are the
snapshot from the best validation epoch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, UsageError
from .model import Dropout, ModelConfig, ModelParams, model_forward, nll

__all__ = [
    "TrainConfig",
    "Adam",
    "split_dataset",
    "train",
    "TrainResult",
    "EpochRecord",
    "evaluate_ll",
    "volume_nll",
    "write_history_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.001
    batch_size: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 20
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported (per-volume gradients)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split {self.split} does not sum to 1")


class Adam:
    """Adam with bias correction over a named parameter collection.

    Masked kernel taps have exactly zero gradient, so their first and
    second moments stay zero and the update leaves them at exactly zero.
    """

    def __init__(self, params: ModelParams, lr: float = 0.001, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / b1t
            v_hat = v / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        self.params.zero_grads()


def split_dataset(items, split=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffled partition; remainder voxels go to train."""
    items = list(items)
    if len(items) < 10:
        raise UsageError(f"need at least 10 items to split, got {len(items)}")
    if abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split {split} does not sum to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    n = len(items)
    n_val = int(n * split[1])
    n_test = int(n * split[2])
    n_train = n - n_val - n_test
    shuffled = [items[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams  # state restored from the best validation epoch
    history: list  # EpochRecord per completed epoch
    best_epoch: int
    best_val_nll: float
    stopped_early: bool


def volume_nll(params: ModelParams, item, dropout: Optional[Dropout] = None) -> T.Tensor:
    out = model_forward(item.volume, params, dropout)
    return nll(out.emission, item.volume, mask=item.roi)


def _mean_val_nll(params: ModelParams, items) -> float:
    vals = [float(volume_nll(params, item).data) for item in items]
    return float(np.mean(vals))


def train(train_items, val_items, model_cfg: ModelConfig, train_cfg: TrainConfig,
          log=None) -> TrainResult:
    """Fit a fresh model; returns the best-validation snapshot and history.

    All randomness (init, epoch shuffles, dropout) derives from
    ``train_cfg.seed``, so identical seeds reproduce identical histories.
    Non-finite losses abort with the offending epoch and volume id.
    """
    if not train_items or not val_items:
        raise UsageError("train and validation sets must be non-empty")
    master = np.random.SeedSequence(train_cfg.seed)
    init_seq, shuffle_seq, dropout_seq = master.spawn(3)
    params = ModelParams(model_cfg, rng=np.random.default_rng(init_seq))
    params.train_dims = tuple(train_items[0].volume.shape)
    opt = Adam(params, lr=train_cfg.lr, betas=train_cfg.betas, eps=train_cfg.eps)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    history = []
    best_val = np.inf
    best_epoch = 0
    best_state = params.snapshot()
    stopped_early = False

    for epoch in range(1, train_cfg.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(train_items))
        epoch_losses = []
        for idx in order:
            item = train_items[idx]
            dropout = None
            if model_cfg.dropout_rate > 0:
                dropout = Dropout(model_cfg.dropout_rate, dropout_rng)
            opt.zero_grad()
            with T.Tape() as tape:
                loss = volume_nll(params, item, dropout)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, volume {item.id!r}"
                )
            tape.backward(loss)
            opt.step()
            epoch_losses.append(value)
        val_nll = _mean_val_nll(params, val_items)
        record = EpochRecord(
            epoch=epoch,
            train_nll=float(np.mean(epoch_losses)),
            val_nll=val_nll,
            seconds=time.perf_counter() - started,
        )
        history.append(record)
        if log is not None:
            log(record)
        if val_nll < best_val:
            best_val = val_nll
            best_epoch = epoch
            best_state = params.snapshot()
        elif epoch - best_epoch >= train_cfg.patience:
            stopped_early = True
            break

    params.load_state(best_state)
    return TrainResult(
        params=params,
        history=history,
        best_epoch=best_epoch,
        best_val_nll=float(best_val),
        stopped_early=stopped_early,
    )


def evaluate_ll(params: ModelParams, items) -> float:
    """Mean per-voxel log likelihood (negated NLL), dropout disabled."""
    if not items:
        raise UsageError("evaluate_ll: empty dataset part")
    return -_mean_val_nll(params, items)


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_nll", "val_nll", "seconds"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_nll), repr(rec.val_nll),
                             f"{rec.seconds:.3f}"])
