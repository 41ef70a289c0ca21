"""Per-record state timelines and the summaries built from them.

State ids are arbitrary cluster ids; an optional name map only changes how
they are printed.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import KruskalResult, kruskal_wallis
from .triplets import Sample

SIGNIFICANCE = 0.05


@dataclass(frozen=True)
class EventAnnotation:
    record_id: str
    time: float
    description: str

    def __post_init__(self) -> None:
        if not self.time >= 0:
            raise ValueError(f"event time must be >= 0, got {self.time}")


@dataclass
class StateTimeline:
    record_id: str
    window_index: np.ndarray
    start: np.ndarray
    state: np.ndarray

    def __len__(self) -> int:
        return int(self.state.size)


@dataclass
class TransitionEvent:
    record_id: str
    window_index: int
    start: float
    from_state: int
    to_state: int
    event: EventAnnotation | None = None
    gap: float | None = None


def _key(sample: Sample) -> tuple[str, int]:
    return sample.parent_record, sample.window_index


def build_timeline(
    samples: Sequence[Sample], assignments: Sequence[int] | Mapping[tuple[str, int], int]
) -> dict[str, StateTimeline]:
    """Group samples by record in window order. ``assignments`` aligns with ``samples`` or maps (record, window) keys."""
    if isinstance(assignments, Mapping):
        lookup = assignments
    else:
        if len(assignments) != len(samples):
            raise ValueError(f"{len(assignments)} assignments for {len(samples)} samples")
        lookup = {_key(s): int(a) for s, a in zip(samples, assignments)}
    rows: dict[str, list[tuple[int, float, int]]] = defaultdict(list)
    for s in samples:
        if _key(s) not in lookup:
            raise KeyError(f"no state assigned to sample {s.sample_id}")
        rows[s.parent_record].append((s.window_index, s.start, int(lookup[_key(s)])))
    timelines = {}
    for rid in sorted(rows):
        entries = sorted(rows[rid])
        idx = np.array([e[0] for e in entries], dtype=np.int64)
        if np.any(np.diff(idx) <= 0):
            raise ValueError(f"record {rid} has duplicate window indices")
        timelines[rid] = StateTimeline(
            rid, idx, np.array([e[1] for e in entries]), np.array([e[2] for e in entries], dtype=np.int64)
        )
    return timelines


# ---------------------------------------------------------------------------
# frequency table


def format_count(count: int, percent: float) -> str:
    """``45 (100%)``, ``1 (0.6%)``: one decimal, trailing ``.0`` dropped."""
    text = f"{percent:.1f}"
    if text.endswith(".0"):
        text = text[:-2]
    return f"{count} ({text}%)"


@dataclass
class FrequencyTable:
    record_ids: list[str]
    counts: np.ndarray  # (records, k)

    @property
    def k(self) -> int:
        return self.counts.shape[1]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.round(100.0 * self.counts / rows, 1)

    def formatted(self) -> list[list[str]]:
        pct = self.percentages
        return [
            [format_count(int(c), float(p)) for c, p in zip(crow, prow)] for crow, prow in zip(self.counts, pct)
        ]

    def to_csv(self, names: Sequence[str] | None = None) -> str:
        names = list(names) if names else [f"state_{j}" for j in range(self.k)]
        out = ["record_id,windows," + ",".join(names)]
        for rid, crow, cells in zip(self.record_ids, self.counts, self.formatted()):
            out.append(",".join([rid, str(int(crow.sum()))] + cells))
        total = self.totals
        grand = int(total.sum())
        cells = [format_count(int(c), round(100.0 * c / grand, 1)) for c in total]
        out.append(",".join(["total", str(grand)] + cells))
        return "\n".join(out) + "\n"


def state_frequencies(timelines: Mapping[str, StateTimeline], k: int | None = None) -> FrequencyTable:
    if not timelines:
        raise ValueError("no timelines to count")
    if k is None:
        k = int(max(t.state.max() for t in timelines.values())) + 1
    rids = sorted(timelines)
    counts = np.stack([np.bincount(timelines[r].state, minlength=k)[:k] for r in rids])
    return FrequencyTable(rids, counts)


# ---------------------------------------------------------------------------
# transitions and events


def transitions(timeline: StateTimeline) -> list[TransitionEvent]:
    changed = np.flatnonzero(timeline.state[1:] != timeline.state[:-1]) + 1
    return [
        TransitionEvent(
            timeline.record_id,
            int(timeline.window_index[i]),
            float(timeline.start[i]),
            int(timeline.state[i - 1]),
            int(timeline.state[i]),
        )
        for i in changed
    ]


def overlay_events(
    events: Sequence[TransitionEvent], annotations: Sequence[EventAnnotation], tolerance: float = 1800.0
) -> list[TransitionEvent]:
    """Link each transition to the nearest same-record annotation within ``tolerance`` seconds.

    ``gap`` is annotation time minus transition window start; equal distances go to the earlier annotation.
    """
    by_record: dict[str, list[EventAnnotation]] = defaultdict(list)
    for a in annotations:
        by_record[a.record_id].append(a)
    linked = []
    for tr in events:
        best = None
        for a in sorted(by_record.get(tr.record_id, []), key=lambda a: a.time):
            gap = a.time - tr.start
            if abs(gap) <= tolerance and (best is None or abs(gap) < abs(best[1])):
                best = (a, gap)
        event, gap = best if best else (None, None)
        linked.append(TransitionEvent(tr.record_id, tr.window_index, tr.start, tr.from_state, tr.to_state, event, gap))
    return linked


# ---------------------------------------------------------------------------
# feature profile


@dataclass
class FeatureProfile:
    variables: list[str]
    states: list[int]
    mean: np.ndarray  # (states, variables), NaN where unobserved
    median: np.ndarray
    count: np.ndarray
    tests: dict[str, KruskalResult | None] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)
    groups: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def distinctive(self, alpha: float = SIGNIFICANCE) -> list[str]:
        return [v for v in self.variables if self.tests.get(v) is not None and self.tests[v].p_value < alpha]

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        labels = list(names) if names else [str(s) for s in self.states]

        def clean(x: float):
            return None if math.isnan(x) else float(x)

        flagged = set(self.distinctive())
        return {
            "states": labels,
            "variables": {
                v: {
                    "per_state": {
                        labels[i]: {
                            "mean": clean(self.mean[i, j]),
                            "median": clean(self.median[i, j]),
                            "count": int(self.count[i, j]),
                        }
                        for i in range(len(self.states))
                    },
                    "kruskal_wallis": None
                    if self.tests.get(v) is None
                    else {
                        "H": self.tests[v].H,
                        "df": self.tests[v].degrees_of_freedom,
                        "p_value": self.tests[v].p_value,
                        "tie_correction": self.tests[v].tie_correction,
                    },
                    "distinctive": v in flagged,
                    "note": self.notes.get(v),
                }
                for j, v in enumerate(self.variables)
            },
        }


def sample_means(sample: Sample, n_variables: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable mean of observed bin values (NaN if unobserved) and observation counts."""
    counts = np.bincount(sample.variable, minlength=n_variables)[:n_variables]
    sums = np.bincount(sample.variable, weights=sample.value, minlength=n_variables)[:n_variables]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / counts, np.nan), counts


def feature_profile(
    samples: Sequence[Sample], assignments: Sequence[int], variables: Sequence[str]
) -> FeatureProfile:
    """Pool per-sample variable means by state and run a Kruskal-Wallis test per variable."""
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.size != len(samples):
        raise ValueError(f"{assignments.size} assignments for {len(samples)} samples")
    states = sorted(set(assignments.tolist()))
    if len(states) < 2:
        raise ValueError("a feature profile needs at least two states")
    F = len(variables)
    per_sample = [sample_means(s, F) for s in samples]
    means = np.stack([m for m, _ in per_sample])
    obs = np.stack([c for _, c in per_sample])
    mean = np.full((len(states), F), np.nan)
    median = np.full((len(states), F), np.nan)
    count = np.zeros((len(states), F), dtype=np.int64)
    tests: dict[str, KruskalResult | None] = {}
    notes: dict[str, str] = {}
    groups: dict[str, list[np.ndarray]] = {}
    for j, name in enumerate(variables):
        pooled = []
        for i, s in enumerate(states):
            col = means[assignments == s, j]
            col = col[~np.isnan(col)]
            count[i, j] = int(obs[assignments == s, j].sum())
            if col.size:
                mean[i, j] = col.mean()
                median[i, j] = np.median(col)
                pooled.append(col)
        groups[name] = pooled
        if len(pooled) < 2 or sum(g.size for g in pooled) < 3:
            tests[name] = None
            notes[name] = "observed in fewer than two states; test skipped"
        else:
            tests[name] = kruskal_wallis(pooled)
    return FeatureProfile(list(variables), states, mean, median, count, tests, notes, groups)


# ---------------------------------------------------------------------------
# files


def read_assignments(path: str | Path) -> dict[tuple[str, int], int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["record_id", "window_index", "state"]:
            raise ValueError(f"{path}: expected header record_id,window_index,state")
        return {(r["record_id"], int(r["window_index"])): int(r["state"]) for r in reader}


def write_assignments(path: str | Path, samples: Sequence[Sample], assignments: Sequence[int]) -> None:
    rows = sorted((s.parent_record, s.window_index, int(a)) for s, a in zip(samples, assignments))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record_id", "window_index", "state"])
        writer.writerows(rows)


def read_annotations(path: str | Path) -> list[EventAnnotation]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["record_id", "t_seconds", "description"]:
            raise ValueError(f"{path}: expected header record_id,t_seconds,description")
        return [EventAnnotation(r["record_id"], float(r["t_seconds"]), r["description"]) for r in reader]


def timeline_csv(timelines: Mapping[str, StateTimeline]) -> str:
    out = ["record_id,window_index,start_s,state"]
    for rid in sorted(timelines):
        t = timelines[rid]
        out += [f"{rid},{w},{s!r},{st}" for w, s, st in zip(t.window_index.tolist(), t.start.tolist(), t.state.tolist())]
    return "\n".join(out) + "\n"


def transitions_csv(events: Sequence[TransitionEvent]) -> str:
    buf = ["record_id,window_index,start_s,from_state,to_state,event_time_s,event_description,gap_s"]
    for e in events:
        ev_t = "" if e.event is None else repr(float(e.event.time))
        desc = "" if e.event is None else e.event.description.replace(",", ";")
        gap = "" if e.gap is None else repr(float(e.gap))
        buf.append(f"{e.record_id},{e.window_index},{e.start!r},{e.from_state},{e.to_state},{ev_t},{desc},{gap}")
    return "\n".join(buf) + "\n"


def profile_json(profile: FeatureProfile, names: Sequence[str] | None = None) -> str:
    return json.dumps(profile.to_dict(names), indent=2, sort_keys=True) + "\n"
