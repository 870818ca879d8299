"""Transformer building blocks parameterized by an arbitrary boolean mask.

Pre-norm residual blocks: x + attn(norm(x)) followed by x + mlp(norm(x)).
Attention is multi-head scaled dot product with rotary position rotation on
queries and keys; the MLP is a SwiGLU. All blocks are pure functions of their
inputs given read-only weights, so concurrent calls are safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable

import numpy as np

from . import tensor as T
from .masks import MaskMatrix
from .rng import RngTree
from .tensor import Tensor


@dataclass(frozen=True)
class BlockConfig:
    """Shape of one transformer block."""

    hidden_size: int
    num_heads: int
    mlp_expansion: Fraction = Fraction(8, 3)
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_size <= 0 or self.num_heads <= 0:
            raise ValueError("hidden_size and num_heads must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2 != 0:
            raise ValueError(f"head dim {self.head_dim} must be even for rotary rotation")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden_size * Fraction(self.mlp_expansion))


def _linear_init(rng: RngTree, rows: int, cols: int, std: float, dtype) -> Tensor:
    return Tensor(rng.normal((rows, cols), std=std, dtype=dtype), requires_grad=True)


def rope(qk: Tensor, positions: np.ndarray, head_dim: int,
         base: float = 10000.0) -> Tensor:
    """Rotary rotation of a (..., T, head_dim) tensor at integer positions."""
    cos, sin = T.rope_tables(positions, head_dim, base=base, dtype=qk.dtype.type)
    return T.rope_rotate(qk, cos, sin)


class Attention:
    """Multi-head attention restricted exactly to a boolean mask."""

    def __init__(self, cfg: BlockConfig, rng: RngTree, dtype=np.float32):
        self.cfg = cfg
        d = cfg.hidden_size
        std = 0.02
        self.wq = _linear_init(rng.child("wq"), d, d, std, dtype)
        self.wk = _linear_init(rng.child("wk"), d, d, std, dtype)
        self.wv = _linear_init(rng.child("wv"), d, d, std, dtype)
        self.wo = _linear_init(rng.child("wo"), d, d, std, dtype)

    def __call__(self, x: Tensor, mask: MaskMatrix, positions: np.ndarray) -> Tensor:
        cfg = self.cfg
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        b, t, d = x.shape
        if mask.length != t:
            raise T.ShapeError(f"mask length {mask.length} != sequence length {t}")
        h, hd = cfg.num_heads, cfg.head_dim

        def heads(w):
            y = T.matmul(x, w)                      # (B, T, D)
            y = y.reshape((b, t, h, hd))
            return y.transpose((0, 2, 1, 3))        # (B, H, T, hd)

        q = rope(heads(self.wq), positions, hd, cfg.rope_base)
        k = rope(heads(self.wk), positions, hd, cfg.rope_base)
        v = heads(self.wv)
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
        probs = T.masked_softmax(scores, mask.allowed, neg_bias=mask.neg_bias)
        out = T.matmul(probs, v)                    # (B, H, T, hd)
        out = out.transpose((0, 2, 1, 3)).reshape((b, t, d))
        out = T.matmul(out, self.wo)
        return out.reshape((t, d)) if squeeze else out

    def named_params(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.wo", self.wo


class SwigluMlp:
    def __init__(self, cfg: BlockConfig, rng: RngTree, dtype=np.float32):
        d, hdn = cfg.hidden_size, cfg.mlp_hidden
        self.w_gate = _linear_init(rng.child("w_gate"), d, hdn, 0.02, dtype)
        self.w_up = _linear_init(rng.child("w_up"), d, hdn, 0.02, dtype)
        self.w_down = _linear_init(rng.child("w_down"), hdn, d, 0.02, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        gate = T.silu(T.matmul(x, self.w_gate))
        up = T.matmul(x, self.w_up)
        return T.matmul(gate * up, self.w_down)

    def named_params(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        yield f"{prefix}.w_gate", self.w_gate
        yield f"{prefix}.w_up", self.w_up
        yield f"{prefix}.w_down", self.w_down


class TransformerBlock:
    def __init__(self, cfg: BlockConfig, rng: RngTree, dtype=np.float32):
        self.cfg = cfg
        self.attn = Attention(cfg, rng.child("attn"), dtype)
        self.mlp = SwigluMlp(cfg, rng.child("mlp"), dtype)
        self.norm_attn = Tensor(np.ones(cfg.hidden_size, dtype=dtype), requires_grad=True)
        self.norm_mlp = Tensor(np.ones(cfg.hidden_size, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, mask: MaskMatrix, positions: np.ndarray) -> Tensor:
        x = x + self.attn(T.rmsnorm(x, self.norm_attn, self.cfg.norm_eps), mask, positions)
        x = x + self.mlp(T.rmsnorm(x, self.norm_mlp, self.cfg.norm_eps))
        return x

    def named_params(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.mlp.named_params(f"{prefix}.mlp")
        yield f"{prefix}.norm_attn", self.norm_attn
        yield f"{prefix}.norm_mlp", self.norm_mlp


class Transformer:
    """A stack of blocks with a final norm; masking is injected per call."""

    def __init__(self, cfg: BlockConfig, depth: int, rng: RngTree, dtype=np.float32):
        if depth < 1:
            raise ValueError("transformer depth must be >= 1")
        self.cfg = cfg
        self.depth = depth
        self.blocks = [TransformerBlock(cfg, rng.child(f"block{i}"), dtype)
                       for i in range(depth)]
        self.norm_final = Tensor(np.ones(cfg.hidden_size, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, mask: MaskMatrix, positions: np.ndarray) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask, positions)
        return T.rmsnorm(x, self.norm_final, self.cfg.norm_eps)

    def named_params(self, prefix: str) -> Iterable[tuple[str, Tensor]]:
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{prefix}.block{i}")
        yield f"{prefix}.norm_final", self.norm_final


def embed(table: Tensor, token_ids: np.ndarray) -> Tensor:
    """Trainable token-embedding lookup."""
    return T.embedding(table, token_ids)


def collect_params(pairs: Iterable[tuple[str, Tensor]]) -> Dict[str, Tensor]:
    out: Dict[str, Tensor] = {}
    for name, p in pairs:
        if name in out:
            raise ValueError(f"duplicate parameter name {name}")
        out[name] = p
    return out
