"""Run configuration: one JSON file, schema-validated, resolved into typed sections."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .finetune import FinetuneConfig
from .model import ModelConfig, tier_config
from .trainer import MetaConfig, TrainConfig


def load_schema() -> dict:
    return json.loads(resources.files("picomaml").joinpath("config.schema.json").read_text())


@dataclass
class DataConfig:
    corpus: str | None = None
    vocab: str | None = None
    heldout_fraction: float = 0.05
    synthetic: dict = field(default_factory=lambda: {
        "vocab_size": 512, "n_sequences": 4000, "seq_len": 33, "text_fraction": 0.5,
        "text_sentences": 4000, "seed": 0})


@dataclass
class AnalysisConfig:
    particles: tuple[str, ...] = ("si", "ni")
    top_n: int = 10
    slope_k: int = 5


@dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    meta: MetaConfig
    data: DataConfig
    finetune: FinetuneConfig
    analysis: AnalysisConfig

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        """Resolve the model section; ``vocab_size`` fills in an omitted vocabulary size."""
        fields = dict(self.model)
        tier = fields.pop("tier", None)
        if "vocab_size" not in fields and vocab_size is not None:
            fields["vocab_size"] = vocab_size
        try:
            return tier_config(tier, **fields) if tier else ModelConfig(**fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None

    def to_dict(self) -> dict:
        """Plain JSON types (tuples become lists), so the result validates against the schema again."""
        out = {"model": dict(self.model), "train": dataclasses.asdict(self.train),
               "meta": dataclasses.asdict(self.meta), "data": dataclasses.asdict(self.data),
               "finetune": dataclasses.asdict(self.finetune), "analysis": dataclasses.asdict(self.analysis)}
        return json.loads(json.dumps(out))


def parse_config(raw: dict) -> RunConfig:
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    model = raw.get("model", {})
    model = {"tier": model} if isinstance(model, str) else dict(model)
    analysis = dict(raw.get("analysis", {}))
    if "particles" in analysis:
        analysis["particles"] = tuple(analysis["particles"])
    data = dict(raw.get("data", {}))
    if "synthetic" in data:
        data["synthetic"] = {**DataConfig().synthetic, **data["synthetic"]}
    try:
        return RunConfig(model, TrainConfig(**raw.get("train", {})), MetaConfig(**raw.get("meta", {})),
                         DataConfig(**data), FinetuneConfig(**raw.get("finetune", {})), AnalysisConfig(**analysis))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}") from None
    return parse_config(raw)
