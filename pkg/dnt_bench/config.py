"""
Experiment configuration: YAML documents mapped onto section dataclasses.

Unknown keys are rejected at every level and values are type- and
range-checked at load time; every error names its dotted key.
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from twinpress.aggregation import RuleRegistry
from twinpress.caching.environment import CachingConfig
from twinpress.errors import ConfigurationError
from twinpress.fedsync import SyncConfig
from twinpress.forecast import TrainingConfig
from twinpress.network import NetworkConfig, TrafficProfile
from twinpress.threat import AttackConfig


@dataclass(frozen=True)
class NetworkSection:
    rows: int = 10
    cols: int = 10
    capacity: float = 100.0
    horizon: int = 1000
    csv_path: Optional[str] = None
    channel: Optional[str] = None


@dataclass(frozen=True)
class ClusteringSection:
    k: int = 4
    recluster_period: int = 20
    enabled: bool = True


@dataclass(frozen=True)
class ForecasterSection:
    window: int = 12
    learning_rate: float = 0.05
    epochs: int = 5


@dataclass(frozen=True)
class FedSyncSection:
    rounds: int = 30
    rule: str = "mean"
    tau: float = 3.0
    beta: float = 0.5
    batch_size: int = 1
    max_period: int = 4
    htwin_window: int = 144
    eval_window: int = 48
    train_fraction: float = 0.6
    eval_steps: int = 100
    max_events: Optional[int] = 50
    num_workers: int = 1
    root_fraction: float = 0.05


@dataclass(frozen=True)
class AttackSection:
    kind: str = "none"
    n_fake: Optional[int] = None
    fake_fraction: float = 0.2
    lam: float = 10.0
    clip_c: float = 1.0
    base_scale: float = 10.0
    init_scale: float = 10.0
    batch_size: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: root seed, output directory and one section per component."""
    seed: int = 42
    output_dir: str = "outputs"
    network: NetworkSection = field(default_factory=NetworkSection)
    traffic: TrafficProfile = field(
        default_factory=lambda: TrafficProfile(
            base_load=10.0, hotspot_gain=2.0, base_jitter=0.3, phase_jitter=0.3
        )
    )
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    forecaster: ForecasterSection = field(default_factory=ForecasterSection)
    fedsync: FedSyncSection = field(default_factory=FedSyncSection)
    attack: AttackSection = field(default_factory=AttackSection)
    caching: CachingConfig = field(default_factory=CachingConfig)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(rows=self.network.rows, cols=self.network.cols, capacity=self.network.capacity)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(learning_rate=self.forecaster.learning_rate, epochs=self.forecaster.epochs)

    def sync_config(self, batch_size: Optional[int] = None) -> SyncConfig:
        return SyncConfig(
            training=self.training_config(),
            window=self.forecaster.window,
            beta=self.fedsync.beta,
            batch_size=batch_size if batch_size is not None else self.fedsync.batch_size,
            max_period=self.fedsync.max_period,
            htwin_window=self.fedsync.htwin_window,
            root_fraction=self.fedsync.root_fraction,
            seed=self.seed,
        )

    def attack_config(self, kind: Optional[str] = None) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            kind=kind if kind is not None else a.kind,
            n_fake=a.n_fake,
            fake_fraction=a.fake_fraction,
            lam=a.lam,
            clip_c=a.clip_c,
            base_scale=a.base_scale,
            init_scale=a.init_scale,
        )

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = output_dir
        config = dataclasses.replace(self, **changes)
        config.validate()
        return config

    def validate(self) -> None:
        """Range-check every section.

        Raises:
            ConfigurationError: Naming the first offending key
        """
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}", key="seed")
        n = self.network
        if n.rows < 1 or n.cols < 1:
            raise ConfigurationError(f"grid dims must be >= (1, 1), got ({n.rows}, {n.cols})", key="network.rows")
        if n.horizon < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {n.horizon}", key="network.horizon")
        if n.csv_path is not None and not os.path.exists(n.csv_path):
            raise ConfigurationError(f"file {n.csv_path} does not exist", key="network.csv_path")
        self.traffic.validate()
        c = self.clustering
        if c.k < 1 or c.k > n.rows * n.cols:
            raise ConfigurationError(f"k must be in [1, {n.rows * n.cols}], got {c.k}", key="clustering.k")
        if c.recluster_period < 1:
            raise ConfigurationError(f"recluster_period must be >= 1, got {c.recluster_period}", key="clustering.recluster_period")
        f = self.fedsync
        if f.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {f.rounds}", key="fedsync.rounds")
        if f.rule.lower() not in RuleRegistry().names():
            raise ConfigurationError(f"unknown rule '{f.rule}', expected one of {RuleRegistry().names()}", key="fedsync.rule")
        if not f.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {f.tau}", key="fedsync.tau")
        if not 0 < f.train_fraction < 1:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {f.train_fraction}", key="fedsync.train_fraction")
        if f.eval_steps < 1:
            raise ConfigurationError(f"eval_steps must be >= 1, got {f.eval_steps}", key="fedsync.eval_steps")
        if f.eval_window < 1:
            raise ConfigurationError(f"eval_window must be >= 1, got {f.eval_window}", key="fedsync.eval_window")
        if f.max_events is not None and f.max_events < 1:
            raise ConfigurationError(f"max_events must be >= 1, got {f.max_events}", key="fedsync.max_events")
        if f.num_workers < 1:
            raise ConfigurationError(f"num_workers must be >= 1, got {f.num_workers}", key="fedsync.num_workers")
        self.sync_config().validate()
        self.attack_config().validate()
        if self.attack.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.attack.batch_size}", key="attack.batch_size")
        self.caching.validate()


def _coerce(value: Any, tp, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"expected a list, got {value!r}", key=key)
        item_type = args[0] if args else Any
        return tuple(_coerce(v, item_type, key) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"expected true/false, got {value!r}", key=key)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"expected an integer, got {value!r}", key=key)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"expected a number, got {value!r}", key=key)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"expected a string, got {value!r}", key=key)
        return value
    return value


def _build(cls, data: Any, prefix: str = "", base: Any = None):
    """Dataclass `cls` from a mapping; keys absent from the mapping keep `base`'s values."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected a mapping, got {type(data).__name__}", key=prefix or "<root>")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for name in data:
        if name not in known:
            raise ConfigurationError("unknown key", key=f"{prefix}.{name}" if prefix else str(name))
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        if dataclasses.is_dataclass(hints[name]):
            kwargs[name] = _build(hints[name], value, key, getattr(base, name) if base is not None else None)
        else:
            kwargs[name] = _coerce(value, hints[name], key)
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)


def parse_config(document: Dict[str, Any]) -> ExperimentConfig:
    config = _build(ExperimentConfig, document, base=ExperimentConfig())
    config.validate()
    return config


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Load and validate an experiment config; defaults when no path is given.

    Raises:
        ConfigurationError: Unknown key, wrong type, out-of-range value, or
            unreadable / malformed YAML
    """
    if path is None:
        config = ExperimentConfig()
        config.validate()
        return config
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config: {e}", key="--config") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"malformed YAML: {e}", key="--config") from e
    config = parse_config(document or {})
    logging.info(f"Loaded config {path} (seed={config.seed})")
    return config


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    def convert(value):
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value
    return {k: convert(v) if not isinstance(v, dict) else {kk: convert(vv) for kk, vv in v.items()}
            for k, v in dataclasses.asdict(config).items()}
