"""Experiment configuration files (YAML) and the schema they are checked against.

Defaults for the merge section are the coefficient-learning protocol:
Adam at learning rate 0.01, 10 epochs, coefficients initialized to 0.5.
Print the schema with ``python -m npmerge.config``.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .data import LabeledDataset, load_idx, split_dataset, synth_blobs
from .merge import MergeConfig
from .nn import MlpSpec, TrainConfig


class ConfigError(ValueError):
    pass


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "npmerge experiment",
    "type": "object",
    "required": ["task", "architecture", "seeds"],
    "additionalProperties": False,
    "properties": {
        "task": {
            "type": "object",
            "required": ["source"],
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["idx", "blobs"]},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "normalize": {"type": "boolean"},
                "num_classes": {"type": "integer", "minimum": 2},
                "per_class": {"type": "integer", "minimum": 1},
                "dim": {"type": "integer", "minimum": 1},
                "spread": {"type": "number", "minimum": 0},
                "clusters_per_class": {"type": "integer", "minimum": 1},
                "data_seed": {"type": "integer"},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "split": {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["none", "eighty_twenty", "dirichlet", "iid"]},
                        "alphas": {"type": "array", "minItems": 2,
                                   "items": {"type": "number", "exclusiveMinimum": 0}},
                        "majority_fraction": {"type": "number", "exclusiveMinimum": 0,
                                              "exclusiveMaximum": 1},
                        "parts": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "architecture": {
            "type": "object",
            "required": ["layer_widths"],
            "additionalProperties": False,
            "properties": {
                "layer_widths": {"type": "array", "minItems": 3,
                                 "items": {"type": "integer", "minimum": 1}},
                "batchnorm": {"type": "array", "items": {"type": "boolean"}},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "optimizer": {"enum": ["adam", "sgd"]},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "shared_init": {"type": "boolean"},
            },
        },
        "align": {"enum": ["none", "permute", "weight_matching"]},
        "method": {"enum": ["direct_avg", "uniform", "np", "finetune", "ensemble"]},
        "merge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "alpha_init": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "budget": {"oneOf": [{"const": "full"}, {"type": "integer", "minimum": 1}]},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
        "out": {"type": "string"},
    },
}

DEFAULTS = {
    "train": {"optimizer": "adam", "learning_rate": 1e-3, "epochs": 30, "batch_size": 64,
              "weight_decay": 0.0, "shared_init": False},
    "align": "permute",
    "method": "np",
    "merge": {"learning_rate": 0.01, "epochs": 10, "batch_size": 64, "alpha_init": 0.5},
    "budget": "full",
    "out": "runs",
}


def validate(doc: dict) -> dict:
    """Check ``doc`` against the schema and fill defaults; returns a new dict."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    out = copy.deepcopy(DEFAULTS)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = copy.deepcopy(v)
    task = out["task"]
    if task["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in task:
                raise ConfigError(f"config field task/{key}: required for idx source")
    else:
        for key in ("num_classes", "per_class", "dim"):
            if key not in task:
                raise ConfigError(f"config field task/{key}: required for blobs source")
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    doc = yaml.safe_load(path.read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config field <root>: expected a mapping")
    cfg = validate(doc)
    # relative data paths resolve against the config file
    task = cfg["task"]
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if key in task and not Path(task[key]).is_absolute():
            task[key] = str(path.parent / task[key])
    return cfg


def mlp_spec(cfg: dict) -> MlpSpec:
    arch = cfg["architecture"]
    return MlpSpec(tuple(arch["layer_widths"]), tuple(arch.get("batchnorm", ())))


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["optimizer"], t["learning_rate"], t["epochs"], t["batch_size"], seed,
                       t["weight_decay"])


def merge_config(cfg: dict, seed: int) -> MergeConfig:
    m = cfg["merge"]
    return MergeConfig(m["learning_rate"], m["epochs"], m["batch_size"], "adam", m["alpha_init"], seed)


def load_task(cfg: dict) -> tuple[LabeledDataset, LabeledDataset]:
    """Training and test sets named by the ``task`` section."""
    task = cfg["task"]
    if task["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not Path(task[key]).exists():
                raise FileNotFoundError(task[key])
        norm = task.get("normalize", True)
        train = load_idx(task["train_images"], task["train_labels"], norm)
        test = load_idx(task["test_images"], task["test_labels"], norm,
                        num_classes=train.num_classes)
        return train, test
    full = synth_blobs(task["num_classes"], task["per_class"], task["dim"], task.get("spread", 1.0),
                       task.get("data_seed", 0), task.get("clusters_per_class", 1))
    frac = task.get("test_fraction", 0.2)
    order = np.random.Generator(np.random.PCG64(task.get("data_seed", 0) + 1)).permutation(len(full))
    n_test = int(round(frac * len(full)))
    return full.subset(np.sort(order[n_test:]), "train"), full.subset(np.sort(order[:n_test]), "test")


def split_parts(cfg: dict, train: LabeledDataset, seed: int) -> list[LabeledDataset]:
    split = cfg["task"].get("split", {"kind": "none"})
    kind = split["kind"]
    if kind == "none":
        return [train]
    if kind == "iid":
        parts = split.get("parts", 2)
        order = np.random.Generator(np.random.PCG64(seed)).permutation(len(train))
        return [train.subset(np.sort(c), f"iid[{j}]") for j, c in enumerate(np.array_split(order, parts))]
    params = {k: v for k, v in split.items() if k in ("alphas", "majority_fraction")}
    return split_dataset(train, kind, seed, **params)


if __name__ == "__main__":
    print(json.dumps(SCHEMA, indent=2))
