"""Alternating pseudo-label clustering: encode, k-means, retrain encoder + classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Parameter, Tensor
from .encoder import EncoderConfig, TripletSet
from .kmeans import ClusterModel, kmeans
from .metrics import METRIC_NAMES, all_indices
from .seeding import stream
from .training import TrainConfig, TrainLog, fit, split_indices

log = logging.getLogger(__name__)

ITERATION_COLUMNS = ("iteration", "inertia", "label_change_fraction") + METRIC_NAMES


@dataclass(frozen=True)
class SlacConfig:
    k: int = 3
    outer_iterations: int = 50
    epochs_per_iteration: int = 200
    patience: int = 10
    batch_size: int = 8
    train_fraction: float = 0.8
    kmeans_restarts: int = 10
    learning_rate: float = 5e-4
    seed: int = 0
    stop_label_change: float | None = None

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        for name in ("outer_iterations", "epochs_per_iteration", "patience", "batch_size", "kmeans_restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class PhaseLog:
    train: TrainLog
    train_accuracy: float
    missing_classes: list[int] = field(default_factory=list)


@dataclass
class IterationRecord:
    iteration: int
    inertia: float
    label_change_fraction: float
    silhouette: float
    dunn: float
    davies_bouldin: float
    calinski_harabasz: float
    phase: PhaseLog | None = None

    def csv_row(self) -> str:
        vals = [self.iteration] + [getattr(self, c) for c in ITERATION_COLUMNS[1:]]
        return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals)


@dataclass
class SlacResult:
    params: dict[str, Parameter]
    head: dict[str, Parameter]
    model: ClusterModel
    representations: np.ndarray
    iterations: list[IterationRecord]

    @property
    def assignments(self) -> np.ndarray:
        return self.model.assignments

    def log_csv(self) -> str:
        return "\n".join([",".join(ITERATION_COLUMNS)] + [r.csv_row() for r in self.iterations]) + "\n"


def extract_pseudo_labels(model: ClusterModel) -> np.ndarray:
    """One-hot ``(N, k)`` pseudo-labels from cluster assignments."""
    return np.eye(model.k)[model.assignments]


def match_labels(previous: np.ndarray, current: np.ndarray, k: int) -> np.ndarray:
    """Relabel ``current`` to maximise agreement with ``previous`` (Hungarian matching)."""
    table = np.zeros((k, k))
    np.add.at(table, (current, previous), 1)
    rows, cols = linear_sum_assignment(-table)
    mapping = np.empty(k, dtype=np.int64)
    mapping[rows] = cols
    return mapping[current]


def label_change_fraction(previous: np.ndarray | None, current: np.ndarray, k: int) -> float:
    if previous is None:
        return 1.0
    return float(np.mean(match_labels(previous, current, k) != previous))


def new_classifier_head(config: EncoderConfig, k: int, seed: int, iteration: int) -> dict[str, Parameter]:
    return enc.linear_head(config.d, k, stream(seed, "init", "classifier", iteration))


def _classify_batch(sets, idx, params, head, config, training=False, rng=None) -> Tensor:
    batch = enc.collate([sets[i] for i in idx])
    return enc.apply_head(head, enc.forward(params, config, batch, training, rng))


def predict(sets: Sequence[TripletSet], params, head, config: EncoderConfig, batch_size: int = 32) -> np.ndarray:
    """Class probabilities in inference mode."""
    frozen = {n: Tensor(p.data) for n, p in {**params, **head}.items()}
    out = []
    for lo in range(0, len(sets), batch_size):
        logits = _classify_batch(sets, np.arange(lo, min(lo + batch_size, len(sets))), frozen, frozen, config).data
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        out.append(z / z.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def train_classification_phase(
    sets: Sequence[TripletSet],
    labels: np.ndarray,
    params: dict[str, Parameter],
    head: dict[str, Parameter],
    config: EncoderConfig,
    slac: SlacConfig,
    iteration: int = 1,
) -> PhaseLog:
    """Fit encoder and classifier jointly to one-hot pseudo-labels by mean cross-entropy."""
    if labels.shape[0] != len(sets):
        raise ValueError(f"{labels.shape[0]} labels for {len(sets)} samples")
    k = labels.shape[1]
    train_idx, val_idx = split_indices(
        len(sets), slac.train_fraction, stream(slac.seed, "classify", iteration, "split")
    )
    present = set(labels[train_idx].argmax(axis=1).tolist())
    missing = [c for c in range(k) if c not in present]
    if missing:
        log.warning("iteration %d: pseudo-classes %s absent from the training split", iteration, missing)
    everything = {**params, **head}

    def batch_loss(idx, training, rng):
        loss = ad.cross_entropy(_classify_batch(sets, idx, params, head, config, training, rng), labels[idx])
        return loss, loss.item() * idx.size

    def eval_sum(idx):
        frozen = {n: Tensor(p.data) for n, p in everything.items()}
        total = 0.0
        for lo in range(0, idx.size, 32):
            chunk = idx[lo : lo + 32]
            total += ad.cross_entropy(_classify_batch(sets, chunk, frozen, frozen, config), labels[chunk]).item() * chunk.size
        return total

    train_config = TrainConfig(
        batch_size=slac.batch_size,
        patience=slac.patience,
        train_fraction=slac.train_fraction,
        max_epochs=slac.epochs_per_iteration,
        learning_rate=slac.learning_rate,
        seed=slac.seed,
    )
    history = fit(everything, train_idx, val_idx, batch_loss, eval_sum, train_config, tag=f"classify{iteration}")
    history.train_idx, history.val_idx = train_idx, val_idx
    probs = predict([sets[i] for i in train_idx], params, head, config)
    accuracy = float(np.mean(probs.argmax(axis=1) == labels[train_idx].argmax(axis=1)))
    return PhaseLog(history, accuracy, missing)


def run_slac(
    sets: Sequence[TripletSet],
    config: EncoderConfig,
    slac: SlacConfig,
    params: dict[str, Parameter] | None = None,
    from_random: bool = False,
) -> SlacResult:
    """Alternate k-means pseudo-labelling and classification for ``slac.outer_iterations`` rounds.

    The returned cluster model is the last round's k-means fit, together with
    the representations it was fitted on.
    """
    if params is None:
        if not from_random:
            raise ValueError("run_slac needs a pretrained encoder unless from_random=True")
        params = enc.init_params(config, slac.seed)
    if len(sets) < slac.k:
        raise ValueError(f"cannot form {slac.k} clusters from {len(sets)} samples")
    records: list[IterationRecord] = []
    previous = None
    head: dict[str, Parameter] = {}
    for it in range(1, slac.outer_iterations + 1):
        reps = enc.encode_all(sets, params, config)
        model = kmeans(reps, slac.k, restarts=slac.kmeans_restarts, seed=stream(slac.seed, "kmeans", it))
        change = label_change_fraction(previous, model.assignments, slac.k)
        labels = extract_pseudo_labels(model)
        head = new_classifier_head(config, slac.k, slac.seed, it)
        phase = train_classification_phase(sets, labels, params, head, config, slac, it)
        scores = all_indices(reps, model.assignments) if len(np.unique(model.assignments)) > 1 else {
            m: math.nan for m in METRIC_NAMES
        }
        records.append(IterationRecord(it, model.inertia, change, **scores, phase=phase))
        log.info(
            "iteration %d inertia %.6g change %.4f silhouette %.4f acc %.3f",
            it, model.inertia, change, scores["silhouette"], phase.train_accuracy,
        )
        previous = model.assignments
        if slac.stop_label_change is not None and it > 1 and change <= slac.stop_label_change:
            break
    return SlacResult(params, head, model, reps, records)
