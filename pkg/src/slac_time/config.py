"""Strict TOML run configuration. Unknown keys and wrongly typed values are errors."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoder import EncoderConfig
from .slac import SlacConfig
from .synth import GenConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass
class Paths:
    out: str = "out"
    data: str | None = None
    pretrain_data: str | None = None
    catalog: str | None = None
    annotations: str | None = None
    checkpoint: str | None = None
    assignments: str | None = None
    representations: str | None = None


@dataclass
class DataSection:
    window_len: float = 1800.0
    bin_width: float = 10.0


@dataclass
class EncoderSection:
    d: int = 48
    ffn_units: int = 100
    n_blocks: int = 2
    n_heads: int = 4
    dropout: float = 0.2
    max_triplets: int = 512


@dataclass
class PretrainSection:
    batch_size: int = 8
    patience: int = 10
    train_fraction: float = 0.8
    max_epochs: int = 200
    learning_rate: float = 5e-4
    split_level: str = "instance"


@dataclass
class SlacSection:
    k: int = 3
    outer_iterations: int = 50
    epochs_per_iteration: int = 200
    patience: int = 10
    batch_size: int = 8
    train_fraction: float = 0.8
    kmeans_restarts: int = 10
    learning_rate: float = 5e-4
    stop_label_change: float | None = None


@dataclass
class SynthSection:
    n_records: int = 16
    windows_per_record: int = 20
    plan: str = "event"
    switch_prob: float = 0.15
    missing_rate: float = 0.2
    missing_mode: str = "mcar"
    interval: float = 10.0
    jitter: float = 2.0


@dataclass
class MetricsSection:
    k_values: list[int] = field(default_factory=lambda: [3, 4, 5])
    restarts: int = 10


@dataclass
class ReportSection:
    tolerance: float = 1800.0
    state_names: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    slac: SlacSection = field(default_factory=SlacSection)
    synth: SynthSection = field(default_factory=SynthSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    report: ReportSection = field(default_factory=ReportSection)
    base_dir: Path = field(default_factory=Path.cwd)

    # -- derived component configs -------------------------------------

    def encoder_config(self, n_variables: int) -> EncoderConfig:
        return EncoderConfig(n_variables=n_variables, **dataclasses.asdict(self.encoder))

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.pretrain))

    def slac_config(self) -> SlacConfig:
        return SlacConfig(seed=self.seed, **dataclasses.asdict(self.slac))

    def gen_config(self) -> GenConfig:
        return GenConfig(seed=self.seed, window_len=self.data.window_len, **dataclasses.asdict(self.synth))

    # -- paths ------------------------------------------------------------

    def resolve(self, value: str | None, default: str | None = None) -> Path | None:
        """Config-relative path, or ``default`` inside the output directory."""
        if value is None:
            return None if default is None else self.out_dir / default
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        p = Path(self.paths.out)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


_TYPES = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _check_value(where: str, annotation: str, value: Any) -> Any:
    optional = annotation.endswith("| None")
    base = annotation.replace("| None", "").strip()
    if value is None and optional:
        return None
    if base.startswith("list[") and base.endswith("]"):
        inner = base[5:-1]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_check_value(f"{where}[{i}]", inner, v) for i, v in enumerate(value)]
    expected = {"int": int, "float": float, "str": str, "bool": bool}[base]
    if isinstance(value, bool) and expected is not bool:
        raise ConfigError(f"{where}: expected {base}, got bool")
    if not isinstance(value, _TYPES[expected]):
        raise ConfigError(f"{where}: expected {base}, got {type(value).__name__}")
    return float(value) if expected is float else value


def _build(cls, table: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in table.items():
        kwargs[name] = _check_value(f"{where}.{name}", str(fields[name].type), value)
    return cls(**kwargs)


_SECTIONS = {
    "paths": Paths,
    "data": DataSection,
    "encoder": EncoderSection,
    "pretrain": PretrainSection,
    "slac": SlacSection,
    "synth": SynthSection,
    "metrics": MetricsSection,
    "report": ReportSection,
}


def from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in doc:
        kwargs["seed"] = _check_value("seed", "int", doc["seed"])
    for name, cls in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(cls, doc[name], name)
    config = RunConfig(base_dir=base_dir or Path.cwd(), **kwargs)
    validate(config)
    return config


def validate(config: RunConfig) -> None:
    """Construct every component config once so range errors surface at load time."""
    try:
        config.encoder_config(1)
        config.train_config()
        config.slac_config()
        config.gen_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if config.data.bin_width <= 0 or config.data.window_len < config.data.bin_width:
        raise ConfigError("data: need bin_width > 0 and window_len >= bin_width")
    if not config.metrics.k_values or min(config.metrics.k_values) < 2:
        raise ConfigError("metrics.k_values must be a non-empty list of integers >= 2")
    if config.metrics.restarts < 1:
        raise ConfigError("metrics.restarts must be >= 1")
    if config.report.tolerance < 0:
        raise ConfigError("report.tolerance must be >= 0")


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc, base_dir=path.resolve().parent)
