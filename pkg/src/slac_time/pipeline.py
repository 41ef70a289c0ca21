"""Stage functions shared by the command line and end-to-end tests."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .encoder import EncoderConfig, TripletSet
from .forecast import pretrain
from .seeding import stream
from .slac import SlacConfig, SlacResult, run_slac
from .training import InsufficientDataError, TrainConfig, TrainLog, split_indices
from .triplets import (
    NormalizationStats,
    Sample,
    VariableCatalog,
    fit_normalization,
    ingest_csv,
    make_samples,
    normalize,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.json"


def load_samples(
    data: str | Path, catalog: VariableCatalog, window_len: float = 1800.0, bin_width: float = 10.0
) -> list[Sample]:
    return make_samples(ingest_csv(data, catalog), window_len, bin_width)


def fit_stats(samples: Sequence[Sample], n_variables: int, seed: int, train_fraction: float = 0.8) -> NormalizationStats:
    """Normalization fitted on a seeded sample-level training split."""
    train_idx, _ = split_indices(len(samples), train_fraction, stream(seed, "normalize", "split"))
    if train_idx.size == 0:
        raise InsufficientDataError(f"{len(samples)} sample(s) leave nothing to fit normalization on")
    return fit_normalization([samples[i] for i in train_idx], n_variables)


def triplet_sets(samples: Sequence[Sample], stats: NormalizationStats, max_triplets: int) -> list[TripletSet]:
    return [enc.sample_triplets(normalize(s, stats), max_triplets) for s in samples]


def run_pretrain(
    samples: Sequence[Sample], config: EncoderConfig, train: TrainConfig
) -> tuple[dict, dict, TrainLog, NormalizationStats]:
    stats = fit_stats(samples, config.n_variables, train.seed, train.train_fraction)
    params, head, history = pretrain([normalize(s, stats) for s in samples], config, train)
    return params, head, history, stats


def write_checkpoint(
    path: str | Path,
    params: dict,
    head: dict,
    stats: NormalizationStats,
    config: EncoderConfig,
    catalog: VariableCatalog,
    extra: dict | None = None,
) -> None:
    ad.save_checkpoint(
        path,
        {"encoder": params, "forecast_head": head},
        catalog_hash=ad.content_hash(list(catalog.names)),
        config_hash=ad.content_hash(config.to_dict()),
        extra={"encoder_config": config.to_dict(), "normalization": stats.to_dict(), **(extra or {})},
    )


def read_checkpoint(path: str | Path, catalog: VariableCatalog) -> tuple[dict, EncoderConfig, NormalizationStats]:
    doc = ad.load_checkpoint(path)
    if doc["catalog_hash"] != ad.content_hash(list(catalog.names)):
        raise ValueError(f"{path}: checkpoint was trained on a different variable catalog")
    extra = doc["extra"]
    config = EncoderConfig(**extra["encoder_config"])
    return doc["groups"]["encoder"], config, NormalizationStats.from_dict(extra["normalization"])


def run_cluster(
    samples: Sequence[Sample],
    stats: NormalizationStats,
    config: EncoderConfig,
    slac: SlacConfig,
    params: dict | None,
) -> SlacResult:
    sets = triplet_sets(samples, stats, config.max_triplets)
    return run_slac(sets, config, slac, params=params, from_random=params is None)


def representations_csv(samples: Sequence[Sample], reps: np.ndarray) -> str:
    d = reps.shape[1]
    lines = ["record_id,window_index," + ",".join(f"z{j}" for j in range(d))]
    for s, row in zip(samples, reps):
        lines.append(f"{s.parent_record},{s.window_index}," + ",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def read_representations(path: str | Path) -> tuple[list[tuple[str, int]], np.ndarray]:
    keys, rows = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:2] != ["record_id", "window_index"]:
            raise ValueError(f"{path}: not a representations file")
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(header):
                raise ValueError(f"{path}: row {line_no}: expected {len(header)} fields")
            keys.append((parts[0], int(parts[1])))
            rows.append([float(x) for x in parts[2:]])
    return keys, np.array(rows, dtype=float).reshape(len(rows), len(header) - 2)
