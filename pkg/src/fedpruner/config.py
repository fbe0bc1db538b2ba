"""Experiment configuration and the JSON document schema used by the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

from .errors import ConfigError, InvalidConfig
from .memory import MemoryModel
from .model import ModelConfig

STRATEGIES = ("fedpruner", "fedpruner_plus", "random", "middle", "norm", "rm", "bi", "deep", "full")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fleet_size: int = 20
    participation: float = 0.10
    rounds: int = 30
    local_steps: int = 10
    batch_size: int = 16
    lr_max: float = 1e-2
    lr_min: float = 3e-4
    optimizer: str = "adam"
    strategy: str = "fedpruner"
    data_scheme: str = "iid"
    dirichlet_alpha: float = 0.5
    n_regimes: int = 4
    transition_concentration: float = 0.1
    sequences_per_device: int = 32
    eval_sequences: int = 64
    # device budgets, in units of "whole layers affordable" on top of the fixed cost
    budget_units_low: float = 3.0
    budget_units_high: float | None = None  # None: n_layers + 0.99
    budget_units: float | None = None  # set to give every device the same budget
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.participation <= 1.0:
            raise InvalidConfig("participation must lie in (0, 1]")
        if self.rounds < 0:
            raise InvalidConfig("rounds must be >= 0")
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"unknown strategy {self.strategy!r}")
        if self.data_scheme not in ("iid", "dirichlet"):
            raise InvalidConfig(f"unknown data scheme {self.data_scheme!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        for name in ("fleet_size", "local_steps", "batch_size", "n_regimes", "eval_sequences", "workers"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.sequences_per_device < 1:
            raise InvalidConfig("sequences_per_device must be >= 1")

    @property
    def mode(self) -> str:
        return "component" if self.strategy == "fedpruner_plus" else "layer"

    @property
    def seq_len(self) -> int:
        return self.model.max_seq

    def to_json(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_json()
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        model = ModelConfig(**doc.pop("model", {}))
        return cls(model=model, **doc)


_MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "vocab_size": {"type": "integer", "minimum": 2},
        "d_model": {"type": "integer", "minimum": 1},
        "n_heads": {"type": "integer", "minimum": 1},
        "d_ff": {"type": "integer", "minimum": 1},
        "n_layers": {"type": "integer", "minimum": 1},
        "max_seq": {"type": "integer", "minimum": 1},
        "lora_rank": {"type": "integer", "minimum": 1},
        "lora_alpha": {"type": "number", "exclusiveMinimum": 0},
    },
}

_MEMORY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "bytes_per_param": {"type": "number", "minimum": 0},
        "optimizer_multiplier": {"type": "number", "minimum": 0},
        "activation_bytes": {"type": "number", "minimum": 0},
    },
}

_EXPERIMENT_PROPS = {
    "model": _MODEL_SCHEMA,
    "fleet_size": {"type": "integer", "minimum": 1},
    "participation": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "rounds": {"type": "integer", "minimum": 0},
    "local_steps": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr_max": {"type": "number", "minimum": 0},
    "lr_min": {"type": "number", "minimum": 0},
    "optimizer": {"enum": ["adam", "sgd"]},
    "strategy": {"enum": list(STRATEGIES)},
    "data_scheme": {"enum": ["iid", "dirichlet"]},
    "dirichlet_alpha": {"type": "number", "exclusiveMinimum": 0},
    "n_regimes": {"type": "integer", "minimum": 1},
    "transition_concentration": {"type": "number", "exclusiveMinimum": 0},
    "sequences_per_device": {"type": "integer", "minimum": 1},
    "eval_sequences": {"type": "integer", "minimum": 1},
    "budget_units_low": {"type": "number", "minimum": 0},
    "budget_units_high": {"type": ["number", "null"], "minimum": 0},
    "budget_units": {"type": ["number", "null"], "minimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "workers": {"type": "integer", "minimum": 1},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fedpruner experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        **_EXPERIMENT_PROPS,
        "memory": _MEMORY_SCHEMA,
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "save_checkpoint": {"type": "boolean"},
            },
        },
    },
}


@dataclass(frozen=True)
class OutputOptions:
    checkpoint_every: int = 0  # 0: final checkpoint only
    save_checkpoint: bool = True


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    memory: MemoryModel
    output: OutputOptions = OutputOptions()

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, experiment=replace(self.experiment, **kwargs))

    def to_json(self) -> dict:
        mem = {f.name: getattr(self.memory, f.name) for f in fields(MemoryModel) if f.name in _MEMORY_SCHEMA["properties"]}
        return {**self.experiment.to_json(), "memory": mem, "output": asdict(self.output)}


def memory_for(exp: ExperimentConfig, doc: dict | None = None) -> MemoryModel:
    return MemoryModel(batch_size=exp.batch_size, seq_len=exp.seq_len, **(doc or {}))


def parse_config(doc) -> RunConfig:
    """Validate a config document and build the typed configuration."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from exc
    doc = dict(doc)
    mem_doc = doc.pop("memory", {})
    out_doc = doc.pop("output", {})
    try:
        exp = ExperimentConfig.from_json(doc)
    except InvalidConfig as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(experiment=exp, memory=memory_for(exp, mem_doc), output=OutputOptions(**out_doc))


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    return parse_config(doc)
