"""Flat key=value run configuration with a closed schema.

Files are plain text, one `key = value` per line, `#` comments, dotted keys
for grouping. Fractions like "8/255" are accepted wherever a float is and
parsed as one division, so budgets match their conventional notation
exactly. JSON manifests written by a finished run parse through the same
schema, which makes any run re-executable from its manifest alone.

Unknown keys are rejected with the offending line; so are duplicates.
"""

from __future__ import annotations

import json

import numpy as np

from .attacks import AttackConfig
from .data import (Dataset, load_cifar10_bin, load_dataset, load_mnist_idx,
                   make_synthetic_blobs)
from .errors import ConfigError
from .models import build_cnn4, build_mlp, build_small_resnet
from .selection import SelectionConfig
from .trainer import METHOD_STRATEGY, TrainConfig

# key -> default; the default's type decides how raw strings are parsed
DEFAULTS = {
    "method": "margin",
    "lambda": 1.0,
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "epochs": 10,
    "batch_size": 128,
    "seed": 0,
    "lr_schedule": "constant",
    "eval_every": 1,
    "robust_eval_every": 0,
    "eval_steps": 40,
    "workers": 1,
    "out": "",
    "attack.epsilon": 8.0 / 255.0,
    "attack.alpha": 2.0 / 255.0,
    "attack.steps": 10,
    "attack.random_start": True,
    "selection.rho": 0.25,
    "selection.warmup_epochs": 2,
    "selection.eps_stab": 1e-8,
    "selection.delta_stab": 1e-12,
    "selection.grad_scope": "final_linear",
    "selection.replacement": False,
    "model.kind": "cnn4",
    "model.layers": [],
    "model.channels": [8, 16],
    "model.hidden": 64,
    "model.width": 8,
    "model.normalize": "none",
    "model.seed": -1,
    "data.kind": "",
    "data.train": "",
    "data.eval": "",
    "data.train_images": "",
    "data.train_labels": "",
    "data.eval_images": "",
    "data.eval_labels": "",
    "data.dir": "",
    "data.n_per_class": 50,
    "data.eval_n_per_class": 50,
    "data.classes": 2,
    "data.spread": 0.08,
    "data.dim": 8,
    "data.seed": 0,
    "data.train_limit": 0,
    "data.eval_limit": 0,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_fraction(text: str) -> float:
    """Float literal, or an exact one-division a/b fraction."""
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad fraction {text!r}: {exc}") from None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"bad number {text!r}") from None


def _parse_string_value(key, default, text):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: bad boolean {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: bad integer {text!r}") from None
    if isinstance(default, float):
        return parse_fraction(text)
    if isinstance(default, list):
        if not text:
            return []
        try:
            return [int(p) for p in text.split(",")]
        except ValueError:
            raise ConfigError(f"{key}: bad integer list {text!r}") from None
    return text


def coerce(key, value):
    """Validate a raw (string or JSON-native) value against the schema."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        return _parse_string_value(key, default, value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected string, got {value!r}")
    return value


def parse_kv_text(text: str) -> dict:
    """key = value lines -> {key: (raw string, line number)}."""
    pairs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if " #" in line:
            line = line[:line.index(" #")].strip()
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first at line {pairs[key][1]})")
        pairs[key] = (value.strip(), lineno)
    return pairs


def load_config_file(path) -> dict:
    """Text config or JSON manifest -> {key: raw-or-native value}."""
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]
        return dict(doc)
    return {k: v for k, (v, _) in parse_kv_text(text).items()}


def resolve(file_values: dict | None = None, overrides=()) -> dict:
    """Defaults, then file values, then key=value override strings."""
    out = dict(DEFAULTS)
    for key, value in (file_values or {}).items():
        out[key] = coerce(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = coerce(key.strip(), value.strip())
    if out["workers"] != 1:
        raise ConfigError("only workers=1 (single-worker deterministic mode) is implemented")
    return out


def make_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        method=cfg["method"],
        attack=AttackConfig(eps=cfg["attack.epsilon"], alpha=cfg["attack.alpha"],
                            steps=cfg["attack.steps"], random_start=cfg["attack.random_start"]),
        selection=SelectionConfig(strategy=METHOD_STRATEGY.get(cfg["method"], "margin"),
                                  rho=cfg["selection.rho"],
                                  warmup_epochs=cfg["selection.warmup_epochs"],
                                  eps_stab=cfg["selection.eps_stab"],
                                  delta_stab=cfg["selection.delta_stab"],
                                  grad_scope=cfg["selection.grad_scope"],
                                  replacement=cfg["selection.replacement"]),
        lam=cfg["lambda"], lr=cfg["lr"], momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], seed=cfg["seed"], lr_schedule=cfg["lr_schedule"],
        eval_every=cfg["eval_every"], robust_eval_every=cfg["robust_eval_every"],
        eval_steps=cfg["eval_steps"],
    ).validated()


def load_datasets(cfg: dict):
    """Build (train, eval-or-None) datasets from the data.* keys."""
    kind = cfg["data.kind"]
    if kind == "container":
        if not cfg["data.train"]:
            raise ConfigError("data.kind=container needs data.train")
        train = load_dataset(cfg["data.train"])
        evalset = load_dataset(cfg["data.eval"]) if cfg["data.eval"] else None
    elif kind == "mnist":
        for key in ("data.train_images", "data.train_labels"):
            if not cfg[key]:
                raise ConfigError(f"data.kind=mnist needs {key}")
        train = load_mnist_idx(cfg["data.train_images"], cfg["data.train_labels"])
        evalset = (load_mnist_idx(cfg["data.eval_images"], cfg["data.eval_labels"])
                   if cfg["data.eval_images"] else None)
    elif kind == "cifar10":
        if not cfg["data.dir"]:
            raise ConfigError("data.kind=cifar10 needs data.dir")
        train = load_cifar10_bin(cfg["data.dir"], split="train")
        evalset = load_cifar10_bin(cfg["data.dir"], split="test")
    elif kind == "blobs":
        train = make_synthetic_blobs(cfg["data.n_per_class"], cfg["data.classes"],
                                     cfg["data.spread"], cfg["data.seed"], dim=cfg["data.dim"])
        evalset = make_synthetic_blobs(cfg["data.eval_n_per_class"], cfg["data.classes"],
                                       cfg["data.spread"], cfg["data.seed"] + 1, dim=cfg["data.dim"])
    elif not kind:
        raise ConfigError("data.kind is required (container, mnist, cifar10, or blobs)")
    else:
        raise ConfigError(f"unknown data.kind {kind!r}")
    if cfg["data.train_limit"]:
        train = train.subset(np.arange(min(cfg["data.train_limit"], len(train))))
    if evalset is not None and cfg["data.eval_limit"]:
        evalset = evalset.subset(np.arange(min(cfg["data.eval_limit"], len(evalset))))
    return train, evalset


def make_model(cfg: dict, dataset: Dataset):
    kind = cfg["model.kind"]
    seed = cfg["model.seed"] if cfg["model.seed"] >= 0 else cfg["seed"]
    shape = dataset.input_shape
    if kind == "mlp":
        layers = cfg["model.layers"] or [int(np.prod(shape)), 64, dataset.classes]
        return build_mlp(layers, seed)
    if kind == "cnn4":
        if len(shape) != 3:
            raise ConfigError(f"cnn4 needs image input (C,H,W), dataset has shape {shape}")
        return build_cnn4(shape, dataset.classes, seed,
                          channels=tuple(cfg["model.channels"]), hidden=cfg["model.hidden"])
    if kind == "resnet_s":
        if len(shape) != 3:
            raise ConfigError(f"resnet_s needs image input (C,H,W), dataset has shape {shape}")
        norm = cfg["model.normalize"]
        return build_small_resnet(shape, dataset.classes, cfg["model.width"], seed,
                                  normalize=None if norm == "none" else norm)
    raise ConfigError(f"unknown model.kind {kind!r}, options: mlp, cnn4, resnet_s")
