"""Versioned checkpoint container: named float32 arrays + full run config.

Stored as an npz archive with little-endian arrays and a JSON metadata entry.
Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .optim import OptimizerState
from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(path, params: Dict[str, Tensor], config: dict,
                    step: int = 0, opt: Optional[OptimizerState] = None,
                    extra: Optional[dict] = None) -> None:
    meta = {
        "version": FORMAT_VERSION,
        "step": step,
        "config": config,
        "param_names": sorted(params),
        "has_optimizer": opt is not None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": _le(v.data) for k, v in params.items()}
    if opt is not None:
        meta["optimizer"] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "weight_decay": opt.weight_decay, "grad_clip_norm": opt.grad_clip_norm,
            "step_count": opt.step_count,
        }
        arrays.update({f"opt_m/{k}": _le(v) for k, v in opt.m.items()})
        arrays.update({f"opt_v/{k}": _le(v) for k, v in opt.v.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[dict, Dict[str, np.ndarray], Optional[OptimizerState]]:
    """Returns (meta, param arrays, optimizer state or None)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        try:
            meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
        except KeyError:
            raise CheckpointError(f"{path} is not a checkpoint (missing metadata)")
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint version {meta.get('version')} unsupported "
                f"(expected {FORMAT_VERSION})")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        opt = None
        if meta.get("has_optimizer"):
            o = meta["optimizer"]
            opt = OptimizerState(
                lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                weight_decay=o["weight_decay"], grad_clip_norm=o["grad_clip_norm"],
                step_count=o["step_count"],
                m={k[len("opt_m/"):]: z[k] for k in z.files if k.startswith("opt_m/")},
                v={k[len("opt_v/"):]: z[k] for k in z.files if k.startswith("opt_v/")},
            )
    return meta, params, opt


def restore_params(model_params: Dict[str, Tensor],
                   arrays: Dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into live parameters, validating names/shapes."""
    missing = sorted(set(model_params) - set(arrays))
    unexpected = sorted(set(arrays) - set(model_params))
    if missing or unexpected:
        raise CheckpointError(
            f"parameter mismatch: missing {missing[:4]}, unexpected {unexpected[:4]}")
    for name, p in model_params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
