"""Seeded regime-switching vital-sign generator with ground truth, plus the adjusted Rand index."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .analysis import EventAnnotation
from .seeding import stream
from .triplets import DEFAULT_VARIABLES, TimeSeriesRecord, VariableCatalog

PLANS = ("fixed", "random", "event")
MISSING_MODES = ("mcar", "block")

# Regime profiles loosely shaped after three bedside pictures: intracranial
# hypertension with poor perfusion, respiratory distress, and a stable state.
# The numbers are generator conventions only.
_DEFAULT_MEANS = {
    #        DBP    SBP    CPP   HR     ICP   PRx   RR    SpO2
    "A": (60.0, 105.0, 55.0, 85.0, 25.0, 0.30, 12.0, 96.0),
    "B": (70.0, 120.0, 70.0, 115.0, 8.0, 0.10, 28.0, 88.0),
    "C": (80.0, 140.0, 80.0, 60.0, 10.0, 0.00, 16.0, 97.0),
}
_DEFAULT_STDS = (5.0, 8.0, 5.0, 6.0, 3.0, 0.1, 2.0, 1.5)


@dataclass(frozen=True)
class RegimeSpec:
    means: np.ndarray  # (regimes, variables)
    stds: np.ndarray
    phi: float = 0.9
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        stds = np.broadcast_to(np.asarray(self.stds, dtype=float), means.shape).copy()
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        if means.shape[0] < 2:
            raise ValueError("need at least two regimes")
        if np.any(stds <= 0):
            raise ValueError("regime stds must be positive")
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must be in [0, 1), got {self.phi}")
        if not self.names:
            object.__setattr__(self, "names", tuple(str(i) for i in range(means.shape[0])))

    @property
    def n_regimes(self) -> int:
        return self.means.shape[0]

    @property
    def n_variables(self) -> int:
        return self.means.shape[1]

    def pooled_std(self) -> np.ndarray:
        return np.sqrt((self.stds**2).mean(axis=0))

    @classmethod
    def default(cls, phi: float = 0.9) -> RegimeSpec:
        return cls(np.array(list(_DEFAULT_MEANS.values())), np.array(_DEFAULT_STDS), phi, tuple(_DEFAULT_MEANS))


@dataclass(frozen=True)
class GenConfig:
    n_records: int = 16
    windows_per_record: int = 20
    plan: str = "event"
    switch_prob: float = 0.15
    missing_rate: float = 0.2
    missing_mode: str = "mcar"
    interval: float = 10.0
    jitter: float = 2.0
    window_len: float = 1800.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.plan not in PLANS:
            raise ValueError(f"plan must be one of {PLANS}, got {self.plan!r}")
        if self.missing_mode not in MISSING_MODES:
            raise ValueError(f"missing_mode must be one of {MISSING_MODES}, got {self.missing_mode!r}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError(f"switch_prob must be in [0, 1], got {self.switch_prob}")
        if self.n_records < 1 or self.windows_per_record < 1:
            raise ValueError("n_records and windows_per_record must be >= 1")
        if self.interval <= 0 or not 0.0 <= self.jitter < self.interval / 2:
            raise ValueError("need interval > 0 and 0 <= jitter < interval / 2")
        if self.window_len < self.interval:
            raise ValueError("window_len must cover at least one sampling interval")


@dataclass
class GroundTruth:
    regimes: dict[tuple[str, int], int] = field(default_factory=dict)
    events: dict[str, list[EventAnnotation]] = field(default_factory=dict)
    observed_slots: int = 0
    total_slots: int = 0

    def labels_for(self, keys) -> np.ndarray:
        return np.array([self.regimes[k] for k in keys])

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["record_id", "window_index", "regime"])
            for (rid, w), r in sorted(self.regimes.items()):
                writer.writerow([rid, w, r])

    def write_annotations(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["record_id", "t_seconds", "description"])
            for rid in sorted(self.events):
                for ev in self.events[rid]:
                    writer.writerow([rid, repr(float(ev.time)), ev.description])


def _regime_plan(config: GenConfig, n_regimes: int, rng: np.random.Generator) -> np.ndarray:
    n = config.windows_per_record
    if config.plan == "fixed":
        return np.full(n, rng.integers(n_regimes))
    if config.plan == "random":
        return rng.integers(n_regimes, size=n)
    plan = np.empty(n, dtype=np.int64)
    plan[0] = rng.integers(n_regimes)
    for w in range(1, n):
        if rng.random() < config.switch_prob:
            plan[w] = (plan[w - 1] + rng.integers(1, n_regimes)) % n_regimes
        else:
            plan[w] = plan[w - 1]
    return plan


def _record(
    index: int, config: GenConfig, regimes: RegimeSpec, truth: GroundTruth
) -> TimeSeriesRecord:
    rng = stream(config.seed, "synth", index)
    rid = f"R{index:03d}"
    n_steps = int(round(config.window_len / config.interval))
    F = regimes.n_variables
    plan = _regime_plan(config, regimes.n_regimes, rng)
    times, variables, values = [], [], []
    events = []
    offsets = (np.arange(n_steps) + 0.5) * config.interval
    scale = np.sqrt(1.0 - regimes.phi**2)
    for w, r in enumerate(plan):
        truth.regimes[(rid, w)] = int(r)
        start = w * config.window_len
        if w > 0 and config.plan == "event" and plan[w - 1] != r:
            names = regimes.names
            events.append(EventAnnotation(rid, start, f"regime change {names[plan[w - 1]]} -> {names[r]}"))
        shocks = rng.standard_normal((n_steps, F)) * regimes.stds[r]
        shocks[1:] *= scale
        series = regimes.means[r] + lfilter([1.0], [1.0, -regimes.phi], shocks, axis=0)
        t = start + offsets[:, None] + rng.uniform(-config.jitter, config.jitter, (n_steps, F))
        if config.missing_mode == "mcar":
            keep = rng.random((n_steps, F)) >= config.missing_rate
        else:
            keep = np.broadcast_to(rng.random(F) >= config.missing_rate, (n_steps, F))
        truth.observed_slots += int(keep.sum())
        truth.total_slots += keep.size
        f_idx = np.broadcast_to(np.arange(F), (n_steps, F))
        times.append(t[keep])
        variables.append(f_idx[keep])
        values.append(series[keep])
    duration = config.windows_per_record * config.window_len
    # one closing reading at the end time so the record spans every window
    times.append(np.array([duration]))
    variables.append(np.array([0]))
    values.append(np.array([regimes.means[plan[-1], 0]]))
    truth.events[rid] = events
    return TimeSeriesRecord.from_arrays(
        rid, np.concatenate(times), np.concatenate(variables), np.concatenate(values), duration
    )


def generate(config: GenConfig, regimes: RegimeSpec | None = None) -> tuple[list[TimeSeriesRecord], GroundTruth]:
    regimes = regimes or RegimeSpec.default()
    truth = GroundTruth()
    records = [_record(i, config, regimes, truth) for i in range(config.n_records)]
    return records, truth


def default_catalog(regimes: RegimeSpec | None = None) -> VariableCatalog:
    n = (regimes or RegimeSpec.default()).n_variables
    if n == len(DEFAULT_VARIABLES):
        return VariableCatalog(DEFAULT_VARIABLES)
    return VariableCatalog(tuple(f"V{i}" for i in range(n)))


def _pairs(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in length: {a.shape} vs {b.shape}")
    if a.size < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    index = _pairs(table).sum()
    rows = _pairs(table.sum(axis=1)).sum()
    cols = _pairs(table.sum(axis=0)).sum()
    expected = rows * cols / _pairs(np.array(float(a.size)))
    maximum = 0.5 * (rows + cols)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))
