"""JSON run configuration. Unknown keys anywhere are rejected before any work starts."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import BaselineConfig
from .data import DatasetBundle, benchmark_dataset, load_csv_bundle, load_idx_dir, synth_blobs
from .engine import LAYER_TYPES, MemristorLayer, NetworkSpec, TrainConfig
from .errors import ConfigError, DataError
from .info import KernelSpec
from .optim import AdamConfig
from .rl import RlConfig
from .variants import AugmentSpec


@dataclass
class DatasetConfig:
    """``name``: mnist | fashion | blobs | idx | csv."""

    name: str = "mnist"
    n_train: int = 8000
    n_test: int = 2000
    path: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    blobs_per_class: int = 100
    blobs_classes: int = 4
    blobs_dim: int = 16
    blobs_spread: float = 1.0
    held_out: list = field(default_factory=list)

    def check_paths(self, base: Path) -> None:
        if self.name == "idx" and not (self.path and (base / self.path).is_dir()):
            raise DataError(f"IDX directory {self.path!r} does not exist")
        if self.name == "csv":
            for p in (self.train_csv, self.test_csv):
                if not (p and (base / p).is_file()):
                    raise DataError(f"CSV file {p!r} does not exist")
        if self.name not in ("mnist", "fashion", "blobs", "idx", "csv"):
            raise ConfigError(f"unknown dataset {self.name!r}")

    def load(self, seed: int, base: Path = Path(".")) -> DatasetBundle:
        if self.name == "blobs":
            return synth_blobs(self.blobs_per_class, self.blobs_classes, self.blobs_dim, self.blobs_spread, seed)
        if self.name == "idx":
            from .data import subset
            return subset(load_idx_dir(base / self.path), self.n_train, self.n_test, seed)
        if self.name == "csv":
            return load_csv_bundle(base / self.train_csv, base / self.test_csv)
        return benchmark_dataset(self.name, self.n_train, self.n_test, seed)


@dataclass
class FaultConfig:
    unit: int = 0
    fraction: float = 0.25
    mode: str = "random"


@dataclass
class UnsupConfig:
    checkpoints: list = field(default_factory=lambda: [100, 400, 1600])
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(2, 0.1, 0.2))
    probe_seed: int = 0


@dataclass
class RlSection:
    network: NetworkSpec = None
    config: RlConfig = field(default_factory=RlConfig)
    train: TrainConfig = None


@dataclass
class BenchConfig:
    methods: list = field(default_factory=lambda: ["pib", "bp", "pat", "dfa"])
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    generalization: bool = True


@dataclass
class DistributedSection:
    workers: list = field(default_factory=list)
    listen: str = "127.0.0.1:0"
    progress_every: int = 50
    timeout: float = 600.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkSpec = None
    train: TrainConfig = field(default_factory=TrainConfig)
    fault: FaultConfig = field(default_factory=FaultConfig)
    unsup: UnsupConfig = field(default_factory=UnsupConfig)
    rl: RlSection = field(default_factory=RlSection)
    bench: BenchConfig = field(default_factory=BenchConfig)
    distributed: DistributedSection = field(default_factory=DistributedSection)

    def __post_init__(self):
        if self.network is None:
            self.network = NetworkSpec([MemristorLayer(784, 100)], (100, 10))


def default_rl_network(bins: int = 16) -> NetworkSpec:
    from .engine import OpticalLayer
    return NetworkSpec([OpticalLayer(4 * bins, 128, 64, "eight_bit", activation="relu")], (64, 2))


def default_rl_train(seed: int = 0) -> TrainConfig:
    return TrainConfig(beta=0.0, alpha=2.0, optimizer=AdamConfig(lr=1e-3), seed=seed)


# -- strict construction --------------------------------------------------------


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return data


def _make(cls, data, where: str):
    data = dict(_strict(cls, data, where))
    nested = {"optimizer": AdamConfig, "kernel": KernelSpec, "augment": AugmentSpec, "baseline": BaselineConfig}
    for key, sub in nested.items():
        if key in data and dataclasses.is_dataclass(sub) and isinstance(data[key], dict):
            data[key] = _make(sub, data[key], f"{where}.{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def network_from_dict(d, where: str = "network") -> NetworkSpec:
    d = _strict(NetworkSpec, d, where)
    if "layers" not in d or "final_readout" not in d:
        raise ConfigError(f"{where} needs layers and final_readout")
    layers = []
    for i, entry in enumerate(d["layers"]):
        if not isinstance(entry, dict) or entry.get("type") not in LAYER_TYPES:
            raise ConfigError(f"{where}.layers[{i}] needs a type of {sorted(LAYER_TYPES)}")
        entry = dict(entry)
        layers.append(_make(LAYER_TYPES[entry.pop("type")], entry, f"{where}.layers[{i}]"))
    try:
        return NetworkSpec(layers, tuple(d["final_readout"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(d: dict) -> RunConfig:
    d = dict(_strict(RunConfig, d, "config"))
    sections = {"dataset": DatasetConfig, "train": TrainConfig, "fault": FaultConfig, "unsup": UnsupConfig,
                "distributed": DistributedSection}
    for key, cls in sections.items():
        if key in d:
            d[key] = _make(cls, d[key], key)
    if "network" in d:
        d["network"] = network_from_dict(d["network"])
    if "bench" in d:
        d["bench"] = _make(BenchConfig, d["bench"], "bench")
    if "rl" in d:
        rl = dict(_strict(RlSection, d["rl"], "rl"))
        if "network" in rl:
            rl["network"] = network_from_dict(rl["network"], "rl.network")
        if "config" in rl:
            rl["config"] = _make(RlConfig, rl["config"], "rl.config")
        if "train" in rl:
            rl["train"] = _make(TrainConfig, rl["train"], "rl.train")
        d["rl"] = RlSection(**rl)
    try:
        return RunConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


def load(path, base: Path | None = None) -> RunConfig:
    """Parse and validate a config file; relative dataset paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_dict(raw)
    cfg.dataset.check_paths(base or path.parent)
    return cfg


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate one seed to every seeded section."""
    cfg.seed = seed
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    cfg.bench.baseline = dataclasses.replace(cfg.bench.baseline, seed=seed)
    cfg.rl.config = dataclasses.replace(cfg.rl.config, seed=seed)
    if cfg.rl.train is not None:
        cfg.rl.train = dataclasses.replace(cfg.rl.train, seed=seed)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["network"] = cfg.network.to_dict()
    d["train"] = cfg.train.to_dict()
    rl = d["rl"]
    for key, value in (("network", cfg.rl.network), ("train", cfg.rl.train)):
        if value is None:
            rl.pop(key)
        else:
            rl[key] = value.to_dict()
    return d
