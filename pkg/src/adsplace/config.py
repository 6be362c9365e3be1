"""Run configuration: YAML sections mapped onto the library's config dataclasses."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .anomaly import AnomalyThresholds
from .benchmark import FAMILIES, PRESETS, BenchmarkConfig, ProtocolConfig
from .errors import ConfigError, ContractViolation
from .igso3 import DEFAULT_TABLE_PARAMS
from .noise import NoiseSchedule
from .relax import RelaxConfig
from .sampler import SamplerConfig
from .score_net import NetConfig
from .training import TrainConfig

# Fields that never change results and are left out of the config hash.
NON_SEMANTIC = {("out_dir",), ("evaluate", "workers"), ("table", "cache")}


def _defaults(cls, drop=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in drop:
            continue
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return {
        "seed": 0,
        "out_dir": "runs/default",
        "schedule": _defaults(NoiseSchedule),
        "sampler": _defaults(SamplerConfig, drop=("seed",)),
        "relax": _defaults(RelaxConfig),
        "anomaly": _defaults(AnomalyThresholds),
        "calculator": {"preset": "multi_well", "file": None},
        "model": _defaults(NetConfig, drop=("species", "conditional")),
        "training": _defaults(TrainConfig, drop=("seed",)),
        "benchmark": _defaults(BenchmarkConfig, drop=("seed",)),
        "table": dict(DEFAULT_TABLE_PARAMS, cache="igso3_table.npz"),
        "evaluate": {"nsites": [1, 2, 5, 10], "methods": ["diffusion", "random_baseline"], "workers": 1,
                     "diversity_samples": 10},
    }


def _merge(base: dict, override: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            where = ".".join(path + (k,))
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config section {'.'.join(path + (k,))!r} must be a mapping")
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=default_config)

    def __post_init__(self):
        self.validate()

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def validate(self) -> None:
        seed = self.data.get("seed")
        if seed is None or isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed is mandatory and must be a non-negative integer")
        if self.data["calculator"]["preset"] not in PRESETS:
            raise ConfigError(f"unknown calculator preset {self.data['calculator']['preset']!r}; known: {sorted(PRESETS)}")
        if self.data["benchmark"]["family"] not in FAMILIES:
            raise ConfigError(f"unknown benchmark family {self.data['benchmark']['family']!r}")
        ev = self.data["evaluate"]
        if not ev["nsites"] or any(int(n) < 1 for n in ev["nsites"]):
            raise ConfigError("evaluate.nsites must be a non-empty list of positive integers")
        bad = set(ev["methods"]) - {"diffusion", "random_baseline"}
        if bad:
            raise ConfigError(f"unknown evaluation methods {sorted(bad)}")
        try:
            self.schedule(), self.sampler(), self.relax(), self.anomaly(), self.training(), self.benchmark()
            self.net(species=())
        except (TypeError, ValueError, ContractViolation) as exc:
            raise ConfigError(str(exc)) from None

    # typed views
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self.data["schedule"])

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(**self.data["sampler"], seed=self.seed)

    def relax(self) -> RelaxConfig:
        return RelaxConfig(**self.data["relax"])

    def anomaly(self) -> AnomalyThresholds:
        return AnomalyThresholds(**self.data["anomaly"])

    def training(self) -> TrainConfig:
        return TrainConfig(**self.data["training"], seed=self.seed)

    def benchmark(self) -> BenchmarkConfig:
        return BenchmarkConfig(**self.data["benchmark"], seed=self.seed)

    def net(self, species, conditional: Optional[bool] = None) -> NetConfig:
        if conditional is None:
            conditional = self.data["training"]["mode"] == "conditional"
        return NetConfig(**self.data["model"], species=tuple(species), conditional=conditional)

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(relax=self.relax(), thresholds=self.anomaly(), sampler=self.sampler(),
                              schedule=self.schedule(), seed=self.seed)

    def table_params(self) -> dict:
        return {k: v for k, v in self.data["table"].items() if k != "cache"}

    def config_hash(self) -> str:
        return config_hash(self.data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)


def _strip(data: dict, path=()) -> dict:
    out = {}
    for k, v in data.items():
        p = path + (k,)
        if p in NON_SEMANTIC:
            continue
        out[k] = _strip(v, p) if isinstance(v, dict) else v
    return out


def config_hash(data: dict) -> str:
    """SHA-256 of the canonical JSON of the semantic fields."""
    blob = json.dumps(_strip(data), sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path=None, seed: Optional[int] = None, out_dir=None, overrides: Optional[dict] = None) -> RunConfig:
    data = default_config()
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping at top level")
        data = _merge(data, user)
    if overrides:
        data = _merge(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = str(out_dir)
    return RunConfig(data)


def as_jsonable(obj: Any):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    return obj
