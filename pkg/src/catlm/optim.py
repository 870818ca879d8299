"""Optimizers: AdamW with decoupled weight decay plus plain SGD.

Gradient clipping is by global norm over all parameters jointly, applied
before the moment updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    """AdamW hyperparameters and per-parameter moment arrays."""

    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: Optional[float] = 1.0
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: Dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            elif self.m[name].shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for {name}")


def global_grad_norm(params: Dict[str, Tensor]) -> float:
    """L2 norm over the concatenation of all gradients (f64 accumulation)."""
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        total += float(np.dot(g.reshape(-1).astype(np.float64),
                              g.reshape(-1).astype(np.float64)))
    return math.sqrt(total)


def clip_gradients(params: Dict[str, Tensor], max_norm: float) -> float:
    """Rescale all grads in place if their global norm exceeds ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def adamw_step(params: Dict[str, Tensor], state: OptimizerState) -> float:
    """One AdamW update over ``params`` (name -> Tensor with .grad populated).

    Returns the pre-clip global gradient norm. Parameters without a gradient
    are skipped; non-finite gradients raise with the offending name.
    """
    state.ensure(params)
    if state.grad_clip_norm is not None:
        norm = clip_gradients(params, state.grad_clip_norm)
    else:
        norm = global_grad_norm(params)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= np.asarray(state.lr * update, dtype=p.data.dtype)
    return norm


def sgd_step(params: Dict[str, Tensor], lr: float,
             grad_clip_norm: Optional[float] = None) -> float:
    """Plain SGD update; mainly for tests and tiny calibration runs."""
    if grad_clip_norm is not None:
        norm = clip_gradients(params, grad_clip_norm)
    else:
        norm = global_grad_norm(params)
    for p in params.values():
        if p.grad is not None:
            p.data -= np.asarray(lr * p.grad, dtype=p.data.dtype)
    return norm


def zero_grads(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
