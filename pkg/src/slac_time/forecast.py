"""Self-supervised pretraining: forecast the next five bins from an observation window."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Parameter, Tensor
from .encoder import EncoderConfig, TripletSet
from .seeding import stream
from .training import InsufficientDataError, TrainConfig, TrainLog, fit, split_indices
from .triplets import Sample

log = logging.getLogger(__name__)

OBSERVATION_WINDOWS = (20, 40, 80, 160, 175)
HORIZON = 5
MIN_INSTANCES = 10


@dataclass
class ForecastInstance:
    inputs: TripletSet
    target: np.ndarray
    mask: np.ndarray
    sample_id: str
    window: int


def build_forecast_instances(
    samples: Sequence[Sample],
    n_variables: int,
    max_triplets: int,
    windows: Sequence[int] = OBSERVATION_WINDOWS,
    horizon: int = HORIZON,
) -> list[ForecastInstance]:
    """One instance per (sample, window) whose input is non-empty and whose horizon observes something."""
    instances = []
    for sample in samples:
        for w in windows:
            observed = sample.bin_index < w
            if not observed.any():
                continue
            ahead = (sample.bin_index >= w) & (sample.bin_index < w + horizon)
            counts = np.bincount(sample.variable[ahead], minlength=n_variables)
            if not counts.any():
                continue
            sums = np.bincount(sample.variable[ahead], weights=sample.value[ahead], minlength=n_variables)
            mask = counts > 0
            target = np.where(mask, sums / np.maximum(counts, 1), 0.0)
            instances.append(
                ForecastInstance(
                    enc.sample_triplets(sample, max_triplets, max_bin=w), target, mask, sample.sample_id, w
                )
            )
    return instances


def _stack(instances: Sequence[ForecastInstance], idx: np.ndarray):
    chosen = [instances[i] for i in idx]
    batch = enc.collate([c.inputs for c in chosen])
    return batch, np.stack([c.target for c in chosen]), np.stack([c.mask for c in chosen])


def forecast_batch(
    batch: enc.TripletBatch,
    params: dict[str, Parameter],
    head: dict[str, Parameter],
    config: EncoderConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return enc.apply_head(head, enc.forward(params, config, batch, training, rng))


def forecast_forward(
    instance: ForecastInstance, params: dict[str, Parameter], head: dict[str, Parameter], config: EncoderConfig
) -> np.ndarray:
    return forecast_batch(enc.collate([instance.inputs]), params, head, config).data[0]


def forecast_loss(
    instances: Sequence[ForecastInstance],
    params: dict[str, Parameter],
    head: dict[str, Parameter],
    config: EncoderConfig,
    batch_size: int = 32,
) -> float:
    """Full-dataset masked MSE: squared errors summed over every instance, divided by their count."""
    return _eval_sum(instances, params, head, config, np.arange(len(instances)), batch_size) / len(instances)


def _eval_sum(instances, params, head, config, idx, batch_size=32) -> float:
    frozen = {n: Tensor(p.data) for n, p in params.items()}
    frozen_head = {n: Tensor(p.data) for n, p in head.items()}
    total = 0.0
    for lo in range(0, idx.size, batch_size):
        batch, target, mask = _stack(instances, idx[lo : lo + batch_size])
        pred = forecast_batch(batch, frozen, frozen_head, config)
        total += ad.masked_mse(pred, target, mask).item() * len(target)
    return total


def new_forecast_head(config: EncoderConfig, seed: int) -> dict[str, Parameter]:
    return enc.linear_head(config.d, config.n_variables, stream(seed, "init", "forecast_head"))


def train_forecaster(
    instances: Sequence[ForecastInstance],
    params: dict[str, Parameter],
    head: dict[str, Parameter],
    config: EncoderConfig,
    train_config: TrainConfig,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
) -> TrainLog:
    """Adam on per-batch masked MSE; leaves encoder and head at the best-validation epoch."""
    everything = {**params, **head}

    def batch_loss(idx, training, rng):
        batch, target, mask = _stack(instances, idx)
        pred = forecast_batch(batch, params, head, config, training, rng)
        loss = ad.masked_mse(pred, target, mask, n_total=idx.size)
        return loss, loss.item() * idx.size

    def eval_sum(idx):
        return _eval_sum(instances, params, head, config, idx)

    return fit(everything, train_idx, val_idx, batch_loss, eval_sum, train_config, tag="pretrain")


def pretrain(
    samples: Sequence[Sample],
    config: EncoderConfig,
    train_config: TrainConfig,
    params: dict[str, Parameter] | None = None,
) -> tuple[dict[str, Parameter], dict[str, Parameter], TrainLog]:
    """Pretrain an encoder on the forecasting proxy task with an 80:20 seeded split."""
    instances = build_forecast_instances(samples, config.n_variables, config.max_triplets)
    if len(instances) < MIN_INSTANCES:
        raise InsufficientDataError(
            f"only {len(instances)} forecast instances (need {MIN_INSTANCES}); supply more or longer records"
        )
    if params is None:
        params = enc.init_params(config, train_config.seed)
    head = new_forecast_head(config, train_config.seed)
    groups = [i.sample_id for i in instances] if train_config.split_level == "sample" else None
    train_idx, val_idx = split_indices(
        len(instances), train_config.train_fraction, stream(train_config.seed, "pretrain", "split"), groups
    )
    log.info("pretraining on %d instances (%d train, %d val)", len(instances), train_idx.size, val_idx.size)
    history = train_forecaster(instances, params, head, config, train_config, train_idx, val_idx)
    history.train_idx, history.val_idx = train_idx, val_idx
    return params, head, history
