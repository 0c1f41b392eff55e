"""Experiment configuration: one TOML file plus ``section.key=value`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import tomli

from .entities import SCORER_KINDS
from .model import FUSION_KINDS

VARIANTS = ("full", "no_entities", "no_bm25", "document_level_bm25")
OUTPUT_ENV = "REGENT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: str = ""
    queries: str = ""
    qrels: str = ""
    doc_links: str = ""
    query_links: str = ""
    embeddings: str = ""
    descriptions: str = ""
    vocab: str = ""
    stopwords: str = ""
    output_dir: str = "regent_out"


@dataclass
class ModelSection:
    hidden_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    cross_layers: int = 2
    max_len: int = 512
    query_max_len: int = 64
    d_ff: int = 0  # 0 means 4 * hidden_dim
    dropout: float = 0.1
    encoder_mode: str = "trainable_transformer"
    fusion: str = "learned_sigmoid"
    variant: str = "full"


@dataclass
class PipelineSection:
    depth: int = 1000
    top_k_entities: int = 20
    scorer: str = "supervised_cross"
    n_folds: int = 5


@dataclass
class TrainingSection:
    lr: float = 2e-5
    warmup_steps: int = 1000
    batch_size: int = 8
    epochs: int = 10
    patience: int = 3
    clip_norm: float = 1.0
    entity_ranker_epochs: int = 20


@dataclass
class AblateSection:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    fusions: list = field(default_factory=lambda: ["learned_sigmoid"])
    scorers: list = field(default_factory=list)  # empty: the pipeline scorer only


@dataclass
class ExperimentConfig:
    seed: int | None = None
    paths: Paths = field(default_factory=Paths)
    model: ModelSection = field(default_factory=ModelSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    base_dir: str = field(default=".", compare=False)
    output_override: str = field(default="", compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d.pop("output_override")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def path(self, name: str) -> Path | None:
        value = getattr(self.paths, name)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def output_dir(self) -> Path:
        if self.output_override:
            return Path(self.output_override)
        env = os.environ.get(OUTPUT_ENV)
        return Path(env) if env else self.path("output_dir")

    def validate(self, required: Sequence[str] = ()) -> None:
        problems = []
        if self.seed is None:
            problems.append("seed is mandatory")
        for name in (f.name for f in dataclasses.fields(Paths)):
            if name == "output_dir":
                continue
            p = self.path(name)
            if p is None:
                if name in required:
                    problems.append(f"paths.{name} is required for this command")
            elif not p.exists():
                problems.append(f"paths.{name}: {p} does not exist")
        m, pl = self.model, self.pipeline
        if m.fusion not in FUSION_KINDS:
            problems.append(f"model.fusion {m.fusion!r} not in {FUSION_KINDS}")
        if m.variant not in VARIANTS:
            problems.append(f"model.variant {m.variant!r} not in {VARIANTS}")
        if pl.scorer not in SCORER_KINDS:
            problems.append(f"pipeline.scorer {pl.scorer!r} not in {SCORER_KINDS}")
        for v in self.ablate.variants:
            if v not in VARIANTS:
                problems.append(f"ablate.variants: unknown variant {v!r}")
        for f in self.ablate.fusions:
            if f not in FUSION_KINDS:
                problems.append(f"ablate.fusions: unknown fusion {f!r}")
        for s in self.ablate.scorers:
            if s not in SCORER_KINDS:
                problems.append(f"ablate.scorers: unknown scorer {s!r}")
        if m.hidden_dim % m.num_heads:
            problems.append("model.hidden_dim must be divisible by model.num_heads")
        if pl.depth < 1 or pl.top_k_entities < 1 or pl.n_folds < 2:
            problems.append("pipeline.depth and top_k_entities must be >= 1, n_folds >= 2")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def _apply(cfg: ExperimentConfig, tree: dict, origin: str) -> None:
    for key, value in tree.items():
        if key == "seed":
            cfg.seed = value
            continue
        section = getattr(cfg, key, None)
        if not dataclasses.is_dataclass(section) or not isinstance(value, dict):
            raise ConfigError(f"{origin}: unknown setting {key!r}")
        names = {f.name for f in dataclasses.fields(section)}
        for k, v in value.items():
            if k not in names:
                raise ConfigError(f"{origin}: unknown setting {key}.{k}")
            setattr(section, k, v)


def parse_override(text: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}``; the value is read as TOML, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    parts = key.strip().split(".")
    tree: dict = {}
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return tree


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                tree = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _apply(cfg, tree, str(path))
        cfg.base_dir = str(path.parent)
    for text in overrides:
        _apply(cfg, parse_override(text), "override")
    return cfg
