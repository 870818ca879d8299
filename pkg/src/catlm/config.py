"""Run configuration: schema-validated nested documents with stable hashing.

Configs are YAML/JSON-style nested dicts. Validation fills defaults, rejects
unknown keys with the path to the offending key, and type-checks leaves.
Defaults follow the training recipe the architecture ships with (AdamW at
lr 8e-4, weight decay 0.1, gradient clip 1.0, chunk sizes {4, 8, 16, 32}).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    pass


def _is_type(value, kind) -> bool:
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int_list":
        return isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value)
    if kind == "float_list":
        return isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    raise AssertionError(f"unknown schema kind {kind}")


# leaf spec: (kind, default); None default means required when the
# enclosing section is active
SCHEMA: dict[str, Any] = {
    "seed": ("int", 0),
    "out_dir": ("str", "runs/default"),
    "arch": ("str", "cat"),   # cat | cat_layer | dense | sparse | sliding
    "model": {
        "vocab_size": ("int", 0),           # 0 -> derived from the task
        "pad_id": ("int", 0),
        "width": ("int", 64),
        "depth": ("int", 2),
        "heads": ("int", 2),
        "decoder_width": ("int", 0),        # 0 -> 2 * width
        "compressor_depth": ("int", 0),     # 0 -> max(1, depth // 4)
        "chunk_sizes": ("int_list", [4, 8, 16, 32]),
        "window": ("int", 64),              # sliding baseline
        "sparse_chunk": ("int", 4),         # sparse baseline
    },
    "task": {
        "kind": ("str", "mqar"),            # mqar | corpus
        "mqar": {
            "seq_len": ("int", 256),
            "num_pairs": ("int", 8),
            "num_queries": ("int", 0),      # 0 -> num_pairs
            "num_keys": ("int", 32),
            "num_values": ("int", 32),
            "train_instances": ("int", 4096),
            "test_instances": ("int", 256),
        },
        "corpus": {
            "path": ("str", ""),
            "seq_len": ("int", 256),
            "train_frac": ("float", 0.9),
        },
    },
    "optimizer": {
        "lr": ("float", 8e-4),
        "weight_decay": ("float", 0.1),
        "grad_clip_norm": ("float", 1.0),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.95),
        "eps": ("float", 1e-8),
        "warmup_steps": ("int", 100),
        "schedule": ("str", "constant"),    # constant | cosine
        "min_lr_frac": ("float", 0.1),
    },
    "train": {
        "steps": ("int", 1000),
        "batch_size": ("int", 16),
        "eval_every": ("int", 100),
        "eval_batches": ("int", 4),
        "early_stop_acc": ("float", 0.0),   # 0 disables
        "checkpoint_every": ("int", 0),     # 0 -> final only
        "fixed_chunk": ("int", 0),          # 0 -> adaptive over chunk_sizes
        "strict": ("bool", True),
    },
}


def _validate(node: Any, schema: dict, path: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    out = {}
    for key, value in node.items():
        if key not in schema:
            raise ConfigError(f"{path + key}: unknown key")
    for key, spec in schema.items():
        sub_path = f"{path}{key}"
        if isinstance(spec, dict):
            out[key] = _validate(node.get(key, {}), spec, sub_path + ".")
            continue
        kind, default = spec
        if key in node:
            value = node[key]
        elif default is not None:
            value = default
        else:
            raise ConfigError(f"{sub_path}: required key missing")
        if not _is_type(value, kind):
            raise ConfigError(f"{sub_path}: expected {kind}, got {value!r}")
        if kind == "float":
            value = float(value)
        out[key] = value
    return out


def validate_config(raw: dict) -> dict:
    """Normalize a raw config dict: defaults applied, unknown keys rejected."""
    cfg = _validate(raw or {}, SCHEMA, "")
    if cfg["arch"] not in ("cat", "cat_layer", "dense", "sparse", "sliding"):
        raise ConfigError(f"arch: unknown architecture {cfg['arch']!r}")
    if cfg["task"]["kind"] not in ("mqar", "corpus"):
        raise ConfigError(f"task.kind: unknown task {cfg['task']['kind']!r}")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: Optional[str] = None, preset: Optional[str] = None,
                overrides: Optional[list[str]] = None) -> dict:
    """Load + validate a config from a file or packaged preset, with overrides.

    Overrides are dotted ``key.path=value`` strings parsed as YAML scalars.
    """
    raw: dict = {}
    if preset:
        raw = _load_preset(preset)
    if path:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        raw = _deep_merge(raw, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, _, literal = item.partition("=")
        value = yaml.safe_load(literal)
        node = raw
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {p} is not a mapping")
        node[parts[-1]] = value
    return validate_config(raw)


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_preset(name: str) -> dict:
    from importlib import resources

    fname = name if name.endswith(".yaml") else f"{name}.yaml"
    ref = resources.files("catlm").joinpath("presets", fname)
    if not ref.is_file():
        available = sorted(
            p.name[:-5] for p in resources.files("catlm").joinpath("presets").iterdir()
            if p.name.endswith(".yaml"))
        raise ConfigError(f"preset {name!r} not found; available: {available}")
    return yaml.safe_load(ref.read_text()) or {}


def list_presets() -> list[str]:
    from importlib import resources

    return sorted(p.name[:-5]
                  for p in resources.files("catlm").joinpath("presets").iterdir()
                  if p.name.endswith(".yaml"))
