"""Experiment configuration: one structured-text file with explicit sections.

Every field has a default, so an empty file gives the FedGFM+ schedule.
Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .data.split import SPLIT_PRESETS
from .errors import ConfigError


@dataclass
class SyntheticSection:
    domains: int = 3
    node_count: int = 300
    feature_dim: int = 768
    class_count: int = 3
    offset: float = 2.0
    shared_scale: float = 1.0
    row_normalize: bool = True
    seed: int = 0


@dataclass
class DataSection:
    containers: list[str] = field(default_factory=list)
    synthetic: SyntheticSection | None = None
    # none: one client per dataset; louvain / random: split each dataset into `clients`
    partition: str = "none"
    clients: int | dict = 3
    # preset name, [train, val, test], or "auto" (preset by domain tag, else 0.6/0.2/0.2)
    split: str | list = "auto"


@dataclass
class ModelSection:
    d: int = 768
    heads: int = 4
    tokens: int = 128
    metric: str = "cosine"
    nonlinearity: str = "relu"
    gamma: float = 2.0
    beta: float = 0.25
    dense_threshold: int = 2000
    token_init_scale: float | None = None


@dataclass
class FederationSection:
    rounds: int = 25
    epochs: int = 2
    lr: float = 1e-4
    optimizer: str = "sgd"
    seeds: list[int] = field(default_factory=lambda: [0])
    participation: float = 1.0
    weight_unit: str = "nodes"


@dataclass
class AncdaiSection:
    enabled: bool = True
    sigma: float | None = None
    sigma_rel: float = 0.05


@dataclass
class AdadppSection:
    enabled: bool = True
    prompt_count: int = 3
    top_k: int | None = None


@dataclass
class FinetuneSection:
    lr: float = 1e-2
    # when set, each run picks the best learning rate on validation
    lr_grid: list[float] | None = None
    patience: int = 20
    max_epochs: int = 1000
    shots: int | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    ancdai: AncdaiSection = field(default_factory=AncdaiSection)
    adadpp: AdadppSection = field(default_factory=AdadppSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, base: Path | None = None) -> "ExperimentConfig":
        d = self.data
        if d.partition not in ("none", "louvain", "random"):
            raise ConfigError(f"data.partition must be none, louvain or random, got {d.partition!r}")
        if not d.containers and d.synthetic is None:
            raise ConfigError("data needs at least one container path or a synthetic section")
        for p in d.containers:
            path = Path(p) if base is None or Path(p).is_absolute() else base / p
            if not path.exists():
                raise ConfigError(f"data container not found: {path}")
        if isinstance(d.split, str):
            if d.split != "auto" and d.split.lower() not in SPLIT_PRESETS:
                raise ConfigError(f"unknown split preset {d.split!r}")
        elif len(d.split) != 3 or sum(d.split) > 1 + 1e-9 or min(d.split) < 0:
            raise ConfigError("data.split ratios must be three non-negative numbers summing to at most 1")
        if d.synthetic is not None and d.synthetic.feature_dim != self.model.d:
            raise ConfigError(
                f"synthetic feature_dim {d.synthetic.feature_dim} does not match model.d {self.model.d}"
            )
        if self.model.metric not in ("cosine", "l2"):
            raise ConfigError("model.metric must be cosine or l2")
        f = self.federation
        if f.optimizer not in ("sgd", "adam"):
            raise ConfigError("federation.optimizer must be sgd or adam")
        if f.rounds < 0 or f.epochs < 1 or f.lr < 0:
            raise ConfigError("federation needs rounds >= 0, epochs >= 1 and lr >= 0")
        if not f.seeds or not self.finetune.seeds:
            raise ConfigError("seed lists must be non-empty")
        a = self.adadpp
        if a.prompt_count < 1:
            raise ConfigError("adadpp.prompt_count must be at least 1")
        if a.top_k is not None:
            pool_size = self.client_count_hint() * a.prompt_count
            if a.top_k < 1 or (pool_size and a.top_k > pool_size):
                raise ConfigError(f"adadpp.top_k={a.top_k} must lie in [1, K*lambda={pool_size}]")
        if self.finetune.shots is not None and self.finetune.shots < 1:
            raise ConfigError("finetune.shots must be at least 1")
        return self

    def client_count_hint(self) -> int:
        """Total client count when knowable without loading data (0 otherwise)."""
        d = self.data
        datasets = len(d.containers) + (d.synthetic.domains if d.synthetic else 0)
        if d.partition == "none":
            return datasets
        if isinstance(d.clients, int):
            return datasets * d.clients
        return 0


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "federation": FederationSection,
    "ancdai": AncdaiSection,
    "adadpp": AdadppSection,
    "finetune": FinetuneSection,
}


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = dict(raw)
    if cls is DataSection and kw.get("synthetic") is not None:
        kw["synthetic"] = _build(SyntheticSection, kw["synthetic"], f"{where}.synthetic")
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from None


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    return ExperimentConfig(**{k: _build(cls, raw.get(k), k) for k, cls in _SECTIONS.items()})


def load_config(path) -> ExperimentConfig:
    """Read YAML or JSON (JSON is valid YAML) and validate relative to the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    cfg = config_from_dict(raw)
    # resolve container paths relative to the config file
    cfg.data.containers = [str(Path(p) if Path(p).is_absolute() else (path.parent / p)) for p in cfg.data.containers]
    return cfg.validate()


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(_plain(cfg), indent=2, sort_keys=True), encoding="utf-8")


def _plain(obj):
    return asdict(obj) if is_dataclass(obj) else obj
