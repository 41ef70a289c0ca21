"""Mini-batch Adam training with validation-based early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Parameter, Tensor
from .seeding import stream

log = logging.getLogger(__name__)

# (indices, training, rng) -> (mean loss over the batch as a graph node, summed loss as float)
BatchLoss = Callable[[np.ndarray, bool, "np.random.Generator | None"], "tuple[Tensor, float]"]
# indices -> summed loss in inference mode
EvalSum = Callable[[np.ndarray], float]


class InsufficientDataError(ValueError):
    """Too little data to run a training stage."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    patience: int = 10
    train_fraction: float = 0.8
    max_epochs: int = 200
    learning_rate: float = 5e-4
    split_level: str = "instance"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        if self.split_level not in ("instance", "sample"):
            raise ValueError(f"split_level must be 'instance' or 'sample', got {self.split_level!r}")


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{e},{t!r},{v!r}" for e, t, v in zip(self.epochs, self.train_loss, self.val_loss)]
        return "\n".join(rows) + "\n"


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def split_indices(
    n: int, train_fraction: float, rng: np.random.Generator, groups: Sequence[str] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split. With ``groups``, whole groups go to one side."""
    if groups is None:
        perm = rng.permutation(n)
        n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    keys = sorted(set(groups))
    if len(keys) < 2:
        raise InsufficientDataError("a group-level split needs at least two groups")
    perm = [keys[i] for i in rng.permutation(len(keys))]
    n_train = min(max(int(round(train_fraction * len(keys))), 1), len(keys) - 1)
    train_keys = set(perm[:n_train])
    mask = np.array([g in train_keys for g in groups])
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def fit(
    params: Mapping[str, Parameter],
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    batch_loss: BatchLoss,
    eval_sum: EvalSum,
    config: TrainConfig,
    *,
    max_epochs: int | None = None,
    tag: str = "fit",
) -> TrainLog:
    """Train ``params`` in place and leave them at the best-validation epoch."""
    shuffle_rng = stream(config.seed, tag, "shuffle")
    dropout_rng = stream(config.seed, tag, "dropout")
    state = AdamState(learning_rate=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    best = ad.snapshot(params)
    history = TrainLog()
    for epoch in range(1, (max_epochs or config.max_epochs) + 1):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        total = 0.0
        for lo in range(0, order.size, config.batch_size):
            loss, batch_sum = batch_loss(order[lo : lo + config.batch_size], True, dropout_rng)
            total += batch_sum
            ad.zero_grad(params.values())
            ad.backward(loss)
            ad.adam_step(params, state)
        val = eval_sum(val_idx) / val_idx.size
        history.epochs.append(epoch)
        history.train_loss.append(total / train_idx.size)
        history.val_loss.append(val)
        stop = stopper.update(val)
        if stopper.best_epoch == epoch:
            best = ad.snapshot(params)
        log.debug("%s epoch %d train %.6g val %.6g", tag, epoch, history.train_loss[-1], val)
        if stop:
            break
    history.stop_epoch = history.epochs[-1]
    history.best_epoch = stopper.best_epoch
    ad.restore(params, best)
    return history
