"""Experiment configuration: one YAML file, validated before any work starts.

The schema is versioned so old configs fail loudly instead of silently
drifting. Defaults follow the reference training protocol (SGD momentum 0.9,
weight decay 1e-4, lambda_base 20, gamma 0.01, tau 2, 20 exemplars per
class); small-scale runs override them explicitly in their config files.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError
from .losses import LossWeights
from .trainer import MODES, TrainSchedule

SCHEMA_VERSION = 1

_SCHEDULE_PROPS = {
    "base_epochs": {"type": "integer", "minimum": 1},
    "inc_epochs": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "inc_lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "momentum": {"type": "number", "minimum": 0, "maximum": 1},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "replay_batch": {"type": ["integer", "null"], "minimum": 1},
    "milestones": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
    "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "decoder_steps": {"type": "integer", "minimum": 1},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "dataset", "protocol", "seeds", "mode", "output_dir"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "num_classes"],
            "properties": {
                "kind": {"enum": ["synthetic", "folder"]},
                "root": {"type": ["string", "null"]},
                "num_classes": {"type": "integer", "minimum": 2},
                "per_class_train": {"type": "integer", "minimum": 1},
                "per_class_test": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 8},
                "class_hue": {"type": "boolean"},
            },
        },
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T"],
            "properties": {"T": {"type": "integer", "minimum": 0}},
        },
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "mode": {"enum": list(MODES)},
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_base": {"type": "number", "exclusiveMinimum": 0},
                "gamma": {"type": "number", "minimum": 0},
                "tau_std": {"type": "number", "exclusiveMinimum": 0},
                "tau_kd": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "schedule": {"type": "object", "additionalProperties": False, "properties": _SCHEDULE_PROPS},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "integer", "minimum": 1}},
                "blocks_per_stage": {"type": "integer", "minimum": 1},
                "scale_init": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "memory": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"budget_per_class": {"type": "integer", "minimum": 0}},
        },
        "trainer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "replay_enabled": {"type": "boolean"},
                "debias_replay": {"type": "boolean"},
                "style_source": {"enum": ["exemplar", "current"]},
                "std_detach": {"type": "boolean"},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corruptions": {"type": "boolean"},
                "landscape": {"type": "boolean"},
                "landscape_directions": {"type": "integer", "minimum": 1},
                "landscape_alphas": {"type": "array", "minItems": 3, "items": {"type": "number"}},
            },
        },
        "output_dir": {"type": "string"},
    },
}

_DEFAULTS = {
    "dataset": {"root": None, "per_class_train": 50, "per_class_test": 12, "image_size": 16, "class_hue": True},
    "loss": {"lambda_base": 20.0, "gamma": 0.01, "tau_std": 2.0, "tau_kd": 2.0},
    "schedule": {},  # TrainSchedule carries its own defaults
    "model": {"widths": [16, 32, 64], "blocks_per_stage": 1, "scale_init": 8.0},
    "memory": {"budget_per_class": 20},
    "trainer": {"replay_enabled": True, "debias_replay": False, "style_source": "exemplar", "std_detach": False},
    "eval": {
        "corruptions": True,
        "landscape": True,
        "landscape_directions": 5,
        "landscape_alphas": [round(-0.5 + 0.1 * i, 10) for i in range(11)],
    },
}


@dataclass
class ExperimentConfig:
    raw: dict
    mode: str
    seeds: list
    output_dir: Path
    num_classes: int
    T: int
    dataset: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    schedule_args: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    memory: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.loss)

    def train_schedule(self) -> TrainSchedule:
        args = dict(self.schedule_args)
        if "milestones" in args:
            args["milestones"] = tuple(args["milestones"])
        return TrainSchedule(**args)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _merged(section: str, data: dict) -> dict:
    out = dict(_DEFAULTS.get(section, {}))
    out.update(data.get(section) or {})
    return out


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a raw mapping against the schema and fill defaults."""
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}") from e

    dataset = _merged("dataset", data)
    dataset["kind"] = data["dataset"]["kind"]
    dataset["num_classes"] = data["dataset"]["num_classes"]
    if dataset["kind"] == "folder" and not dataset.get("root"):
        raise ConfigError("dataset.kind 'folder' requires dataset.root")

    mode = data["mode"]
    trainer = _merged("trainer", data)
    if mode == "exemplar_free_debiased" and trainer["replay_enabled"]:
        trainer["replay_enabled"] = False  # the mode itself forbids replay

    resolved = {
        "schema_version": SCHEMA_VERSION,
        "dataset": dataset,
        "protocol": dict(data["protocol"]),
        "seeds": list(data["seeds"]),
        "mode": mode,
        "loss": _merged("loss", data),
        "schedule": dict(data.get("schedule") or {}),
        "model": _merged("model", data),
        "memory": _merged("memory", data),
        "trainer": trainer,
        "eval": _merged("eval", data),
        "output_dir": data["output_dir"],
    }
    cfg = ExperimentConfig(
        raw=resolved,
        mode=mode,
        seeds=resolved["seeds"],
        output_dir=Path(resolved["output_dir"]),
        num_classes=dataset["num_classes"],
        T=resolved["protocol"]["T"],
        dataset=dataset,
        loss=resolved["loss"],
        schedule_args=resolved["schedule"],
        model=resolved["model"],
        memory=resolved["memory"],
        trainer=trainer,
        eval=resolved["eval"],
    )
    # construct both eagerly so a bad value fails here, not mid-run
    cfg.loss_weights()
    cfg.train_schedule()
    alphas = cfg.eval["landscape_alphas"]
    if not any(a == 0.0 for a in alphas):
        raise ConfigError("eval.landscape_alphas must include 0.0")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    return parse_config(data)


def dump_resolved(cfg: ExperimentConfig, path) -> None:
    """Persist the fully resolved config next to the run artifacts."""
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
