"""Training configuration: dataclasses, TOML loading, strict validation.

Config files are TOML with a top-level ``config_version`` and optional
sections; every omitted key takes its documented default, every unknown key
is an error (typos must not silently change a run).  ``load_config`` also
returns the raw bytes so run directories can snapshot the exact input.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aggregate import AGGREGATOR_METHODS
from .clustering import COST_KINDS
from .errors import SchemaError

CONFIG_VERSION = 1

DATASET_NAMES = ("gaussian-mixture-ring", "two-moons", "checkerboard")


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (128, 128, 128)
    time_embed_dim: int = 32


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "gaussian-mixture-ring"
    size: int = 50000
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ClusteringConfig:
    clusters: int = 5
    cost: str = "timestep"
    min_size: int | None = None
    max_size: int | None = None
    affinity_file: str | None = None


@dataclass(frozen=True)
class AggregatorConfig:
    method: str = "uniform"
    nash_update_every: int = 25
    nash_tol: float = 1e-8


@dataclass(frozen=True)
class AffinityConfig:
    snapshot_every: int = 1000
    probe_size: int = 256
    stride: int = 25


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 20000
    batch_size: int = 128
    learning_rate: float = 1e-3
    checkpoint_every: int = 1000
    timestep_range: tuple[int, int] | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)

    def effective_timestep_range(self) -> tuple[int, int]:
        return self.timestep_range or (1, self.schedule.timesteps)


def _want_int(raw, path):
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise SchemaError(f"{path}: expected an integer, got {raw!r}")
    return int(raw)


def _want_float(raw, path):
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise SchemaError(f"{path}: expected a number, got {raw!r}")
    return float(raw)


def _want_str(raw, path, choices=None):
    if not isinstance(raw, str):
        raise SchemaError(f"{path}: expected a string, got {raw!r}")
    if choices is not None and raw not in choices:
        raise SchemaError(f"{path}: {raw!r} is not one of {', '.join(choices)}")
    return raw


def _want_int_list(raw, path, length=None):
    if not isinstance(raw, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in raw):
        raise SchemaError(f"{path}: expected a list of integers, got {raw!r}")
    if length is not None and len(raw) != length:
        raise SchemaError(f"{path}: expected exactly {length} integers, got {len(raw)}")
    return [int(v) for v in raw]


def _take(table: dict, known: dict, path: str) -> dict:
    """Extract known keys from a TOML table; any leftover key is an error."""
    out = {}
    for key, (conv, default) in known.items():
        if key in table:
            out[key] = conv(table.pop(key), f"{path}.{key}" if path else key)
        else:
            out[key] = default
    if table:
        extra = sorted(table)
        where = f"{path}." if path else ""
        raise SchemaError(f"unknown config key {where}{extra[0]!r}")
    return out


def config_from_dict(doc: dict) -> TrainConfig:
    """Build and validate a TrainConfig from a parsed TOML document."""
    doc = {k: v for k, v in doc.items()}
    version = doc.pop("config_version", None)
    if version is None:
        raise SchemaError("missing config_version")
    if not isinstance(version, int) or isinstance(version, bool) or version != CONFIG_VERSION:
        raise SchemaError(f"unsupported config_version {version!r}, expected {CONFIG_VERSION}")

    def section(name):
        raw = doc.pop(name, {})
        if not isinstance(raw, dict):
            raise SchemaError(f"{name}: expected a table")
        return dict(raw)

    train = _take(section("train"), {
        "seed": (_want_int, 0),
        "iterations": (_want_int, 20000),
        "batch_size": (_want_int, 128),
        "learning_rate": (_want_float, 1e-3),
        "checkpoint_every": (_want_int, 1000),
        "timestep_range": (lambda v, p: tuple(_want_int_list(v, p, 2)), None),
    }, "train")
    sched = _take(section("schedule"), {
        "timesteps": (_want_int, 1000),
        "beta_start": (_want_float, 1e-4),
        "beta_end": (_want_float, 0.02),
    }, "schedule")
    model = _take(section("model"), {
        "hidden": (lambda v, p: tuple(_want_int_list(v, p)), (128, 128, 128)),
        "time_embed_dim": (_want_int, 32),
    }, "model")
    ds_raw = section("dataset")
    ds_params = ds_raw.pop("params", {})
    if not isinstance(ds_params, dict):
        raise SchemaError("dataset.params: expected a table")
    for key, value in ds_params.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"dataset.params.{key}: expected a number, got {value!r}")
    dataset = _take(ds_raw, {
        "name": (lambda v, p: _want_str(v, p, DATASET_NAMES), "gaussian-mixture-ring"),
        "size": (_want_int, 50000),
    }, "dataset")
    clus = _take(section("clustering"), {
        "clusters": (_want_int, 5),
        "cost": (lambda v, p: _want_str(v, p, COST_KINDS), "timestep"),
        "min_size": (_want_int, None),
        "max_size": (_want_int, None),
        "affinity_file": (_want_str, None),
    }, "clustering")
    agg = _take(section("aggregator"), {
        "method": (lambda v, p: _want_str(v, p, AGGREGATOR_METHODS), "uniform"),
        "nash_update_every": (_want_int, 25),
        "nash_tol": (_want_float, 1e-8),
    }, "aggregator")
    aff = _take(section("affinity"), {
        "snapshot_every": (_want_int, 1000),
        "probe_size": (_want_int, 256),
        "stride": (_want_int, 25),
    }, "affinity")
    if doc:
        raise SchemaError(f"unknown config section {sorted(doc)[0]!r}")

    cfg = TrainConfig(
        seed=train["seed"],
        iterations=train["iterations"],
        batch_size=train["batch_size"],
        learning_rate=train["learning_rate"],
        checkpoint_every=train["checkpoint_every"],
        timestep_range=train["timestep_range"],
        schedule=ScheduleConfig(**sched),
        model=ModelConfig(**model),
        dataset=DatasetConfig(name=dataset["name"], size=dataset["size"], params=dict(ds_params)),
        clustering=ClusteringConfig(**clus),
        aggregator=AggregatorConfig(**agg),
        affinity=AffinityConfig(**aff),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: TrainConfig) -> None:
    T = cfg.schedule.timesteps
    checks = [
        (cfg.seed >= 0, "train.seed must be >= 0"),
        (cfg.iterations >= 1, "train.iterations must be >= 1"),
        (cfg.batch_size >= 1, "train.batch_size must be >= 1"),
        (cfg.learning_rate >= 0.0, "train.learning_rate must be >= 0"),
        (cfg.checkpoint_every >= 1, "train.checkpoint_every must be >= 1"),
        (T >= 2, "schedule.timesteps must be >= 2"),
        (0.0 < cfg.schedule.beta_start <= cfg.schedule.beta_end < 1.0,
         "schedule betas must satisfy 0 < beta_start <= beta_end < 1"),
        (len(cfg.model.hidden) >= 1 and all(h >= 1 for h in cfg.model.hidden),
         "model.hidden must be a nonempty list of positive widths"),
        (cfg.model.time_embed_dim >= 2 and cfg.model.time_embed_dim % 2 == 0,
         "model.time_embed_dim must be even and >= 2"),
        (cfg.dataset.size >= 1, "dataset.size must be >= 1"),
        (1 <= cfg.clustering.clusters <= T,
         "clustering.clusters must be between 1 and schedule.timesteps"),
        (cfg.aggregator.nash_update_every >= 1, "aggregator.nash_update_every must be >= 1"),
        (cfg.aggregator.nash_tol > 0.0, "aggregator.nash_tol must be > 0"),
        (cfg.affinity.snapshot_every >= 0, "affinity.snapshot_every must be >= 0"),
        (cfg.affinity.probe_size >= 1, "affinity.probe_size must be >= 1"),
        (cfg.affinity.stride >= 1, "affinity.stride must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise SchemaError(message)
    if cfg.timestep_range is not None:
        t1, t2 = cfg.timestep_range
        if not 1 <= t1 <= t2 <= T:
            raise SchemaError(f"train.timestep_range must satisfy 1 <= t1 <= t2 <= {T}")
    if cfg.clustering.min_size is not None and cfg.clustering.min_size < 1:
        raise SchemaError("clustering.min_size must be >= 1")
    if (cfg.clustering.min_size is not None and cfg.clustering.max_size is not None
            and cfg.clustering.min_size > cfg.clustering.max_size):
        raise SchemaError("clustering.min_size cannot exceed clustering.max_size")
    if cfg.clustering.cost == "gradient" and not cfg.clustering.affinity_file:
        raise SchemaError("clustering.cost = 'gradient' requires clustering.affinity_file")


def load_config(path) -> tuple[TrainConfig, bytes]:
    """Parse and validate a TOML config file; returns (config, raw bytes)."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as e:
        raise SchemaError(f"{path}: not valid TOML ({e})") from e
    try:
        cfg = config_from_dict(doc)
    except SchemaError as e:
        raise SchemaError(f"{path}: {e}") from e
    return cfg, raw
