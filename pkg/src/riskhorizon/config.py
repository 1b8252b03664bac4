"""One JSON document configuring every pipeline stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .central_event import CEConfig
from .corpus import SplitSpec
from .graph import GraphConfig
from .rerank import RerankConfig
from .retrieval import RetrievalConfig
from .synthetic import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class FilterConfig:
    min_visits: int = 2
    min_code_freq: int = 25


@dataclass
class Paths:
    """Artifact file names, resolved against the output directory."""

    cohort: str = "cohort.jsonl"
    rules: str = "rules.json"
    split: str = "split.json"
    train_cohort: str = "train.jsonl"
    val_cohort: str = "val.jsonl"
    test_cohort: str = "test.jsonl"
    vocab: str = "vocab.tsv"
    graph: str = "graph.tsv"
    embeddings: str = "embeddings.bin"
    train_report: str = "train_report.json"
    horizons: str = "horizons.jsonl"
    predictions: str = "predictions.jsonl"
    report: str = "report.json"
    report_csv: str = "report.csv"


_SECTIONS = {
    "paths": Paths,
    "synthetic": SynthSpec,
    "split": SplitSpec,
    "filter": FilterConfig,
    "graph": GraphConfig,
    "train": TrainConfig,
    "central_event": CEConfig,
    "retrieval": RetrievalConfig,
    "rerank": RerankConfig,
}


def _tupled(cls, values: dict) -> dict:
    """Lists coming from JSON become tuples wherever the field default is a tuple."""
    out = dict(values)
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        if f.name in out and isinstance(default, tuple) and isinstance(out[f.name], list):
            out[f.name] = tuple(tuple(x) if isinstance(x, list) else x for x in out[f.name])
    return out


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        if cls is SynthSpec:
            return SynthSpec.from_dict(values)
        return cls(**_tupled(cls, values))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass
class PipelineConfig:
    seed: int = 0
    deterministic: bool = False
    paths: Paths = field(default_factory=Paths)
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    filter: FilterConfig = field(default_factory=FilterConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    central_event: CEConfig = field(default_factory=CEConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - set(_SECTIONS) - {"seed", "deterministic"}
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        kwargs = {name: _build(sc, data[name], name) for name, sc in _SECTIONS.items() if name in data}
        cfg = cls(seed=int(data.get("seed", 0)), deterministic=bool(data.get("deterministic", False)), **kwargs)
        return cfg.with_seed(cfg.seed) if "seed" in data else cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate one global seed into every seeded section."""
        return dataclasses.replace(
            self,
            seed=seed,
            split=dataclasses.replace(self.split, seed=seed),
            graph=dataclasses.replace(self.graph, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "deterministic": self.deterministic}
        for name in _SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if isinstance(section, SynthSpec) else dataclasses.asdict(section)
        return out

    def hash(self) -> str:
        """Digest of everything except file names and the worker policy."""
        body = self.to_dict()
        body.pop("paths")
        body.pop("deterministic")
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
