"""Pipeline configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import SCHEMA_MAX_CONCEPTS, parse_ratios
from .train import TrainConfig

TOY = "builtin:toy"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the first offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def toy_path(name: str) -> Path:
    return Path(str(resources.files("ldsim").joinpath("toy", name)))


@dataclass
class DatasetConfig:
    path: str = TOY
    schema: str = "generic"
    concepts: str | None = None
    min_records: int = 1
    max_len: int = 200
    keep: str = "first"
    split: str = "8:1:1"
    seed: int = 0

    def resolved_path(self) -> Path:
        return toy_path("responses.csv") if self.path == TOY else Path(self.path)

    def resolved_concepts(self) -> Path | None:
        if self.concepts is None and self.path == TOY:
            return toy_path("concepts.csv")
        return Path(self.concepts) if self.concepts else None


@dataclass
class GatewayConfig:
    backend: str = "mock"
    base_url: str | None = None
    model: str | None = None
    api_key_env: str = "LDSIM_API_KEY"
    temperature: float | None = None
    cache_dir: str | None = None
    retries: int = 3
    parallelism: int = 1
    oracle: str | None = None  # prerequisite JSON driving the mock backend


@dataclass
class DistillConfig:
    n_pseudo: int = 5
    every: int = 4
    scope: str = "all"
    seed: int = 0


@dataclass
class EvaluateConfig:
    mode: str = "multi"
    n: int = 30


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    output_dir: str = "runs/default"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def oracle_path(self) -> Path | None:
        if self.gateway.oracle:
            return Path(self.gateway.oracle)
        if self.dataset.path == TOY:
            return toy_path("prerequisites.json")
        return None


_SECTIONS = {"dataset": DatasetConfig, "gateway": GatewayConfig, "distill": DistillConfig,
             "train": TrainConfig, "evaluate": EvaluateConfig}


def _build(cls, section: str, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(section, "expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{section}.{key}", "unknown key")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in doc:
        if key not in _SECTIONS and key != "output_dir":
            raise ConfigError(key, "unknown key")
    kwargs = {name: _build(cls, name, doc[name]) for name, cls in _SECTIONS.items() if name in doc}
    if "output_dir" in doc:
        kwargs["output_dir"] = str(doc["output_dir"])
    cfg = PipelineConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return config_from_dict(doc)


def validate(cfg: PipelineConfig) -> None:
    ds = cfg.dataset
    if ds.schema not in SCHEMA_MAX_CONCEPTS:
        raise ConfigError("dataset.schema", f"unknown schema {ds.schema!r}")
    if not ds.resolved_path().exists():
        raise ConfigError("dataset.path", f"file not found: {ds.path}")
    concepts = ds.resolved_concepts()
    if concepts is not None and not concepts.exists():
        raise ConfigError("dataset.concepts", f"file not found: {ds.concepts}")
    if ds.min_records < 1 or ds.max_len < 1:
        raise ConfigError("dataset.min_records", "min_records and max_len must be >= 1")
    if ds.keep not in ("first", "last"):
        raise ConfigError("dataset.keep", "must be 'first' or 'last'")
    try:
        parse_ratios(ds.split)
    except ValueError as exc:
        raise ConfigError("dataset.split", str(exc)) from None
    gw = cfg.gateway
    if gw.backend not in ("mock", "http"):
        raise ConfigError("gateway.backend", "must be 'mock' or 'http'")
    if gw.backend == "http" and not (gw.base_url and gw.model):
        raise ConfigError("gateway.base_url", "http backend needs base_url and model")
    if gw.backend == "mock":
        oracle = cfg.oracle_path()
        if oracle is not None and not oracle.exists():
            raise ConfigError("gateway.oracle", f"file not found: {oracle}")
    if gw.retries < 0:
        raise ConfigError("gateway.retries", "must be >= 0")
    if cfg.distill.scope not in ("all", "co-occurrence"):
        raise ConfigError("distill.scope", "must be 'all' or 'co-occurrence'")
    if cfg.distill.n_pseudo < 0 or cfg.distill.every < 1:
        raise ConfigError("distill.n_pseudo", "n_pseudo must be >= 0 and every >= 1")
    if cfg.evaluate.mode not in ("multi", "single"):
        raise ConfigError("evaluate.mode", "must be 'multi' or 'single'")
    if cfg.evaluate.n < 1:
        raise ConfigError("evaluate.n", "must be >= 1")
