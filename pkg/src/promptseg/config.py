"""Run configuration: one JSON document, every leaf overridable as ``--dotted.key value``."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable

from .fileio import SCHEMA_VERSION
from .lora import SITE_NAMES


class ConfigError(ValueError):
    """Bad or missing configuration; the message names the offending key."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{msg}: {key}")
        self.key = key


DEFAULT_CONFIG: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "workers": 1,
    "paths": {
        "transcripts": None,
        "rules": None,
        "vocab": None,
        "images": None,
        "annotations": None,
        "gt_masks": None,
        "prompts": None,
        "detections": None,
        "filtered": None,
        "masks": None,
        "external_masks": None,
        "checkpoint": None,
        "adapters": None,
        "host": None,
        "report": None,
        "out_dir": None,
    },
    "dataset": {"n": 64, "domain": "target", "prefix": "syn"},
    "model": {"d_model": 16, "d_hidden": 64},
    "train": {
        "lr": 2e-4,
        "epochs": 200,
        "warmup": 0.10,
        "max_grad_norm": 5.0,
        "batch_size": 32,
        "mode": "lora",
        "weight_decay": 0.01,
        "augment": True,
        "box_weight": 1.0,
        "n_train": 256,
        "n_val": 128,
        "domain": "target",
    },
    "lora": {"rank": 4, "alpha": None, "sites": list(SITE_NAMES)},
    "filter": {"tau": 0.3},
    "segment": {"segmenter": "box_fill"},
    "ablate": {
        "ranks": [32, 64, 128],
        "d_model": 128,
        "d_hidden": 256,
        "site_sets": {
            "visual_enc_dec": ["ffn", "box_head_first"],
            "visual_enc_dec+feature_enhancer": ["ffn", "box_head_first", "image_self_attn"],
            "all": list(SITE_NAMES),
        },
    },
}


def _merge(base: dict[str, Any], update: dict[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(dotted, "unknown config key")
        if isinstance(base[key], dict) and key != "site_sets":
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected an object")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value


def parse_value(raw: str) -> Any:
    """JSON literal if it parses (numbers, true/false/null, lists); otherwise the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(cfg: dict[str, Any], key: str, value: Any) -> None:
    node = cfg
    parts = key.split(".")
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(key, "unknown config key")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(key, "unknown config key")
    if isinstance(node[parts[-1]], dict) and parts[-1] != "site_sets":
        raise ConfigError(key, "cannot override a whole section")
    node[parts[-1]] = value


def get(cfg: dict[str, Any], key: str, required: bool = True) -> Any:
    """Look up ``a.b.c``; a required key that is absent or null raises :class:`ConfigError`."""
    node: Any = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(key, "missing config key")
        node = node[part]
    if node is None and required:
        raise ConfigError(key, "missing config key")
    return node


def load_config(path: str | Path | None = None, overrides: Iterable[tuple[str, str]] = ()) -> dict[str, Any]:
    """Defaults, then the JSON file at ``path``, then ``(dotted key, raw value)`` overrides.

    Relative paths inside a config file resolve against the file's directory.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(str(path), "config must be a JSON object")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version}")
        _merge(cfg, data)
        for key, value in cfg["paths"].items():
            if value is not None and not Path(value).is_absolute():
                cfg["paths"][key] = str(path.parent / value)
    for key, raw in overrides:
        set_dotted(cfg, key, parse_value(raw))
    validate(cfg)
    return cfg


def validate(cfg: dict[str, Any]) -> None:
    tau = cfg["filter"]["tau"]
    if not isinstance(tau, (int, float)) or not 0.0 <= tau <= 1.0:
        raise ConfigError("filter.tau", "must be a number in [0, 1]")
    if cfg["segment"]["segmenter"] not in ("box_fill", "external"):
        raise ConfigError("segment.segmenter", "must be box_fill or external")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers", "must be a positive integer")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "must be an integer")
