"""Irregular multivariate records as observation triplets, windowing and binning.

Missing measurements are represented by absence only. Nothing in this module
imputes, interpolates or pads.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_VARIABLES = ("DBP", "SBP", "CPP", "HR", "ICP", "PRx", "RR", "SpO2")
CSV_HEADER = ("record_id", "t_seconds", "variable", "value")
WINDOW_SECONDS = 1800.0
BIN_SECONDS = 10.0
STD_FLOOR = 1e-8


class IngestError(ValueError):
    """A malformed input row or file. ``row`` is the 1-based line number when known."""

    def __init__(self, message: str, row: int | None = None) -> None:
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


@dataclass(frozen=True)
class VariableCatalog:
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("catalog needs at least one variable")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in catalog: {names}")

    @property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    @classmethod
    def default(cls) -> VariableCatalog:
        return cls(DEFAULT_VARIABLES)

    @classmethod
    def load(cls, path: str | Path) -> VariableCatalog:
        with open(path, encoding="utf-8") as fh:
            names = json.load(fh)
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise IngestError(f"{path}: catalog must be a JSON list of strings")
        return cls(tuple(names))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(list(self.names), fh)
            fh.write("\n")


@dataclass(frozen=True, order=True)
class ObservationTriplet:
    t: float
    f: int
    v: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.t) or self.t < 0:
            raise ValueError(f"triplet time must be finite and >= 0, got {self.t}")
        if not math.isfinite(self.v):
            raise ValueError(f"triplet value must be finite, got {self.v}")
        if self.f < 0:
            raise ValueError(f"variable id must be >= 0, got {self.f}")


class TimeSeriesRecord:
    """Observations of one record, held as parallel arrays in canonical (t, f) order."""

    def __init__(
        self,
        record_id: str,
        triplets: Iterable[ObservationTriplet] = (),
        duration: float | None = None,
    ) -> None:
        trips = list(triplets)
        self._init(
            record_id,
            np.array([tr.t for tr in trips], dtype=float),
            np.array([tr.f for tr in trips], dtype=np.int64),
            np.array([tr.v for tr in trips], dtype=float),
            duration,
        )

    @classmethod
    def from_arrays(cls, record_id: str, times, variables, values, duration: float | None = None) -> TimeSeriesRecord:
        rec = cls.__new__(cls)
        rec._init(
            record_id,
            np.asarray(times, dtype=float),
            np.asarray(variables, dtype=np.int64),
            np.asarray(values, dtype=float),
            duration,
        )
        return rec

    def _init(self, record_id, times, variables, values, duration) -> None:
        if not (times.shape == variables.shape == values.shape):
            raise ValueError("times, variables and values must have equal length")
        if times.size and (not np.all(np.isfinite(times)) or times.min() < 0):
            raise ValueError(f"record {record_id}: times must be finite and >= 0")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"record {record_id}: values must be finite")
        order = np.lexsort((values, variables, times))
        self.record_id = record_id
        self.times = times[order]
        self.variables = variables[order]
        self.values = values[order]
        last = float(self.times[-1]) if self.times.size else 0.0
        if duration is None:
            duration = last
        elif last > duration:
            raise ValueError(f"record {record_id}: triplet at t={last} beyond duration {duration}")
        self.duration = float(duration)

    @property
    def triplets(self) -> list[ObservationTriplet]:
        return [
            ObservationTriplet(float(t), int(f), float(v))
            for t, f, v in zip(self.times, self.variables, self.values)
        ]

    def __len__(self) -> int:
        return int(self.times.size)

    def __repr__(self) -> str:
        return f"TimeSeriesRecord({self.record_id!r}, n={len(self)}, duration={self.duration})"


@dataclass
class Sample:
    """One bin-averaged window. Bin values live in three aligned arrays sorted by (bin, variable)."""

    parent_record: str
    window_index: int
    start: float
    bin_index: np.ndarray
    variable: np.ndarray
    value: np.ndarray
    bin_width: float = BIN_SECONDS
    n_bins: int = int(WINDOW_SECONDS // BIN_SECONDS)

    @property
    def sample_id(self) -> str:
        return f"{self.parent_record}:{self.window_index}"

    @property
    def window_len(self) -> float:
        return self.bin_width * self.n_bins

    def __len__(self) -> int:
        return int(self.value.size)

    def get(self, bin_index: int, variable: int) -> float | None:
        hit = np.flatnonzero((self.bin_index == bin_index) & (self.variable == variable))
        return float(self.value[hit[0]]) if hit.size else None

    def bin_times(self) -> np.ndarray:
        """Representative time (bin midpoint, seconds from window start) of every bin value."""
        return (self.bin_index + 0.5) * self.bin_width

    def with_values(self, value: np.ndarray) -> Sample:
        return Sample(
            self.parent_record,
            self.window_index,
            self.start,
            self.bin_index,
            self.variable,
            np.asarray(value, dtype=float),
            self.bin_width,
            self.n_bins,
        )


@dataclass
class RawWindow:
    record_id: str
    window_index: int
    start: float
    length: float
    times: np.ndarray  # re-based to window start
    variables: np.ndarray
    values: np.ndarray


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "count": self.count.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationStats:
        return cls(
            np.asarray(d["mean"], dtype=float),
            np.asarray(d["std"], dtype=float),
            np.asarray(d["count"], dtype=int),
        )


def ingest_csv(path: str | Path, catalog: VariableCatalog) -> list[TimeSeriesRecord]:
    """Read ``record_id,t_seconds,variable,value`` rows into canonically sorted records."""
    index = catalog.index
    by_record: dict[str, tuple[list, list, list]] = defaultdict(lambda: ([], [], []))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise IngestError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", 1)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise IngestError(f"expected 4 fields, got {len(row)}", row_no)
            rid, t_raw, name, v_raw = row
            if name not in index:
                raise IngestError(f"unknown variable {name!r}", row_no)
            try:
                t, v = float(t_raw), float(v_raw)
            except ValueError:
                raise IngestError(f"unparseable number in {row!r}", row_no) from None
            if not math.isfinite(t) or t < 0:
                raise IngestError(f"t_seconds must be finite and non-negative, got {t_raw!r}", row_no)
            if not math.isfinite(v):
                raise IngestError(f"non-finite value {v_raw!r}", row_no)
            ts, fs, vs = by_record[rid]
            ts.append(t)
            fs.append(index[name])
            vs.append(v)
    return [TimeSeriesRecord.from_arrays(rid, *cols) for rid, cols in sorted(by_record.items())]


def write_csv(path: str | Path, records: Iterable[TimeSeriesRecord], catalog: VariableCatalog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in records:
            names = [catalog.names[f] for f in rec.variables]
            writer.writerows(
                [rec.record_id, repr(float(t)), name, repr(float(v))]
                for t, name, v in zip(rec.times, names, rec.values)
            )


def segment(record: TimeSeriesRecord, window_len: float = WINDOW_SECONDS) -> list[RawWindow]:
    """Cut a record into non-overlapping full windows; a trailing partial window is dropped."""
    if window_len <= 0:
        raise ValueError(f"window_len must be positive, got {window_len}")
    n_windows = int(math.floor(record.duration / window_len + 1e-12))
    if n_windows == 0:
        return []
    times, variables, values = record.times, record.variables, record.values
    which = np.floor(times / window_len).astype(np.int64)
    windows = []
    for i in range(n_windows):
        sel = which == i
        start = i * window_len
        windows.append(
            RawWindow(record.record_id, i, start, window_len, times[sel] - start, variables[sel], values[sel])
        )
    return windows


def bin_average(window: RawWindow, bin_width: float = BIN_SECONDS) -> Sample | None:
    """Mean of each variable within each bin. Returns ``None`` for a window with no observations."""
    if window.values.size == 0:
        return None
    n_bins = int(round(window.length / bin_width))
    bins = np.minimum(np.floor(window.times / bin_width).astype(np.int64), n_bins - 1)
    n_vars = int(window.variables.max()) + 1
    key = bins * n_vars + window.variables
    uniq, inverse = np.unique(key, return_inverse=True)
    sums = np.zeros(uniq.size)
    counts = np.zeros(uniq.size)
    np.add.at(sums, inverse, window.values)
    np.add.at(counts, inverse, 1.0)
    return Sample(
        parent_record=window.record_id,
        window_index=window.window_index,
        start=window.start,
        bin_index=uniq // n_vars,
        variable=uniq % n_vars,
        value=sums / counts,
        bin_width=bin_width,
        n_bins=n_bins,
    )


def make_samples(
    records: Sequence[TimeSeriesRecord],
    window_len: float = WINDOW_SECONDS,
    bin_width: float = BIN_SECONDS,
) -> list[Sample]:
    samples = []
    for rec in records:
        for window in segment(rec, window_len):
            sample = bin_average(window, bin_width)
            if sample is not None:
                samples.append(sample)
    return samples


def fit_normalization(samples: Sequence[Sample], n_variables: int) -> NormalizationStats:
    if not samples:
        raise ValueError("cannot fit normalization on an empty split")
    variables = np.concatenate([s.variable for s in samples])
    values = np.concatenate([s.value for s in samples])
    count = np.bincount(variables, minlength=n_variables)[:n_variables]
    mean = np.zeros(n_variables)
    std = np.ones(n_variables)
    for f in np.flatnonzero(count):
        v = values[variables == f]
        mean[f] = v.mean()
        std[f] = max(v.std(), STD_FLOOR)
    return NormalizationStats(mean, std, count)


def normalize(sample: Sample, stats: NormalizationStats) -> Sample:
    f = sample.variable
    return sample.with_values((sample.value - stats.mean[f]) / stats.std[f])
