"""Experiment configuration: one flat JSON object with dotted keys.

Every key has a typed default in :data:`SCHEMA`. A config file only lists
the keys it changes; ``--set key=value`` overrides are applied on top.
Validation is total: unknown keys, bad types and out-of-range values are
rejected before any work starts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any

from .augment import DEFAULT_RANGES
from .nn import PRESETS
from .synthdata import MATERIALS, SCANNERS
from .train import RECIPES


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class Key:
    default: Any
    kind: str  # int | float | str | bool | list | dict
    doc: str
    choices: tuple = ()


SCHEMA: dict[str, Key] = {
    "seed": Key(0, "int", "master seed for data generation, training and trials"),
    "out_dir": Key("runs", "str", "directory for checkpoints, logs and reports"),
    # dataset
    "data.root": Key("data", "str", "dataset directory holding manifest.csv and images/"),
    "data.subjects": Key(25, "int", "number of synthetic subjects"),
    "data.fingers": Key(2, "int", "fingers per subject"),
    "data.scanners": Key(["A", "B"], "list", "scanner profiles", tuple(SCANNERS)),
    "data.materials": Key(list(MATERIALS), "list", "materials; 'live' is the bona fide class", tuple(MATERIALS)),
    "data.live_impressions": Key(8, "int", "live impressions per finger and scanner"),
    "data.spoof_impressions": Key(4, "int", "impressions per finger, scanner and spoof material"),
    "data.split": Key("random", "str", "train/val split mode", ("random", "subject", "scanner")),
    "data.holdout_scanner": Key("", "str", "validation scanner in scanner split mode ('' = last scanner)", ("",) + tuple(SCANNERS)),
    "data.val_fraction": Key(1 / 3, "float", "validation fraction (count is floored)"),
    # training
    "train.recipes": Key(["strong-aug"], "list", "recipes to train, in order", RECIPES),
    "train.stacked": Key(False, "bool", "accumulate every earlier ladder technique"),
    "train.preset": Key("", "str", "override the recipe's model preset ('' keeps it)", ("",) + tuple(PRESETS)),
    "train.epochs": Key(20, "int", "training epochs"),
    "train.batch_size": Key(32, "int", "mini-batch size"),
    "train.lr": Key(0.05, "float", "base learning rate (cosine decay)"),
    "train.momentum": Key(0.9, "float", "SGD momentum"),
    "train.weight_decay": Key(5e-4, "float", "L2 weight decay"),
    "train.embed_dim": Key(192, "int", "embedding (feature) dimension"),
    "augment.ops": Key([], "list", "ordered op list ('' list keeps the recipe default)", tuple(DEFAULT_RANGES)),
    "augment.ranges": Key({}, "dict", "per-op parameter ranges, e.g. {\"rotate\": {\"deg\": [-10, 10]}}"),
    "augment.p": Key(0.5, "float", "per-op application probability"),
    "style.p": Key(0.5, "float", "style-swap probability per sample"),
    "fmix.alpha": Key(1.0, "float", "Beta(alpha, alpha) for the mixing ratio"),
    "fmix.decay_power": Key(3.0, "float", "spectral decay power of the mask"),
    "fmix.p": Key(0.5, "float", "per-batch FMix probability"),
    "distill.teacher_preset": Key("base", "str", "teacher model preset", tuple(PRESETS)),
    "distill.temperature": Key(5.0, "float", "softmax temperature"),
    "distill.alpha": Key(0.5, "float", "weight of the distillation term"),
    # evaluation
    "eval.model": Key("", "str", "checkpoint (.fplm) or summary.json; '' uses the first trained recipe"),
    "eval.split": Key("val", "str", "split to evaluate", ("train", "val", "test")),
    "eval.threshold_policy": Key("max-accuracy", "str", "threshold policy", ("max-accuracy", "bpcer-at-apcer-target")),
    "eval.apcer_target": Key(0.05, "float", "APCER target of the bpcer-at-apcer-target policy"),
    # extraction
    "extract.split": Key("val", "str", "split whose images are encoded", ("train", "val", "test")),
    "extract.limit": Key(100, "int", "number of images to encode (0 = all)"),
    "extract.warm_runs": Key(100, "int", "timed warm extractions"),
    # integrated matching
    "match.trials_per_type": Key(200, "int", "trials per type (genuine, impostor, attack)"),
    "match.fit_trials": Key(60, "int", "train-split trials per type for the compare-liveness head"),
    "match.weights": Key([0.4, 0.3, 0.3], "list", "fusion weights (match, compare, normal)"),
    "match.grid_rows": Key(3, "int", "patch grid rows"),
    "match.grid_cols": Key(3, "int", "patch grid columns"),
    "match.overlap": Key(0.25, "float", "patch overlap fraction"),
    "match.max_keypoints": Key(16, "int", "keypoints per patch"),
    "match.nms_radius": Key(3, "int", "non-max suppression radius"),
    "match.ratio": Key(0.8, "float", "ratio-test threshold"),
}


def defaults() -> dict[str, Any]:
    return {k: json.loads(json.dumps(v.default)) for k, v in SCHEMA.items()}


def _coerce(key: str, value: Any) -> Any:
    spec = SCHEMA[key]
    kind = spec.kind
    try:
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                value = value.lower() in ("true", "1")
            if not isinstance(value, bool):
                raise ValueError(value)
        elif kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            value = int(value)
        elif kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            value = float(value)
        elif kind == "str":
            if not isinstance(value, str):
                raise ValueError(value)
        elif kind == "list":
            if isinstance(value, str):
                value = json.loads(value) if value.startswith("[") else [v for v in value.split(",") if v]
            if not isinstance(value, list):
                raise ValueError(value)
        elif kind == "dict":
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise ValueError(value)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from exc
    if spec.choices:
        items = value if kind == "list" else [value]
        bad = [v for v in items if v not in spec.choices]
        if bad:
            raise ConfigError(f"{key}: {bad} not in {list(spec.choices)}")
    return value


def validate(cfg: dict[str, Any]) -> dict[str, Any]:
    """Return a fully resolved copy of ``cfg`` or raise :class:`ConfigError`."""
    unknown = sorted(set(cfg) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = defaults()
    for k, v in cfg.items():
        out[k] = _coerce(k, v)
    positive = ["data.subjects", "data.fingers", "data.live_impressions", "data.spoof_impressions", "train.epochs", "train.embed_dim",
                "extract.warm_runs", "match.trials_per_type", "match.fit_trials", "match.max_keypoints",
                "match.grid_rows", "match.grid_cols"]
    for k in positive:
        if out[k] < 1:
            raise ConfigError(f"{k} must be >= 1")
    if out["train.batch_size"] < 2:
        raise ConfigError("train.batch_size must be >= 2")
    for k in ("extract.limit", "match.nms_radius"):
        if out[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    if out["train.lr"] <= 0 or out["distill.temperature"] <= 0:
        raise ConfigError("train.lr and distill.temperature must be positive")
    for k in ("augment.p", "style.p", "fmix.p", "distill.alpha", "eval.apcer_target", "train.momentum"):
        if not 0.0 <= out[k] <= 1.0:
            raise ConfigError(f"{k} must lie in [0, 1]")
    if not 0.0 < out["data.val_fraction"] < 1.0:
        raise ConfigError("data.val_fraction must lie in (0, 1)")
    if not 0.0 <= out["match.overlap"] < 1.0 or not 0.0 < out["match.ratio"] <= 1.0:
        raise ConfigError("match.overlap must lie in [0,1) and match.ratio in (0,1]")
    w = out["match.weights"]
    if len(w) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
        raise ConfigError("match.weights must be 3 non-negative numbers summing to 1")
    if "live" not in out["data.materials"]:
        raise ConfigError("data.materials must include 'live'")
    if not out["train.recipes"]:
        raise ConfigError("train.recipes must name at least one recipe")
    for op, ranges in out["augment.ranges"].items():
        if op not in DEFAULT_RANGES or not isinstance(ranges, dict):
            raise ConfigError(f"augment.ranges: unknown op {op!r}")
        for name, pair in ranges.items():
            if name not in DEFAULT_RANGES[op] or not isinstance(pair, list) or len(pair) != 2 or pair[0] > pair[1]:
                raise ConfigError(f"augment.ranges.{op}.{name}: need [lo, hi] with lo <= hi")
    return out


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    return key.strip(), value.strip()


def load_config(path: str | os.PathLike | None, overrides: list[str] = ()) -> dict[str, Any]:
    raw: dict[str, Any] = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for item in overrides:
        k, v = parse_override(item)
        if k not in SCHEMA:
            raise ConfigError(f"unknown config keys: {k}")
        raw[k] = v
    return validate(raw)


def dump_config(cfg: dict[str, Any]) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def reference() -> str:
    """Markdown listing of every key, its type, default and meaning."""
    lines = ["| key | type | default | description |", "|---|---|---|---|"]
    for k, spec in SCHEMA.items():
        extra = f" (one of: {', '.join(map(str, spec.choices))})" if spec.choices and spec.choices != ("",) else ""
        lines.append(f"| `{k}` | {spec.kind} | `{json.dumps(spec.default)}` | {spec.doc}{extra} |")
    return "\n".join(lines) + "\n"
