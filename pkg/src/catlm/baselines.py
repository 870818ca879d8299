"""Mask-only baselines: dense-causal, strided-sparse, and sliding-window.

All three share the attention/MLP blocks used by the chunk-compressing
decoder; they differ only in the mask spec, so comparisons isolate the masking
strategy. Logits are target-aligned: row t scores token t, predicted from the
output at position t-1 (position 0 has no predictor and is excluded from the
loss).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, Transformer, collect_params
from .masks import MaskMatrix, MaskSpec, build_mask, dense_causal, sliding_window, sparse_strided
from .rng import RngTree
from .tensor import Tensor

__all__ = ["BaselineConfig", "BaselineModel", "baseline_forward"]

ARCHS = ("dense", "sparse", "sliding")


@dataclass(frozen=True)
class BaselineConfig:
    arch: str
    depth: int
    block: BlockConfig
    vocab_size: int
    pad_id: int
    window: Optional[int] = None      # sliding
    chunk_size: Optional[int] = None  # sparse

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown baseline arch {self.arch!r}; expected {ARCHS}")
        if self.arch == "sliding" and (self.window is None or self.window < 1):
            raise ValueError("sliding baseline requires a window >= 1")
        if self.arch == "sparse" and (self.chunk_size is None or self.chunk_size < 2):
            raise ValueError("sparse baseline requires a chunk size >= 2")

    def mask_spec(self) -> MaskSpec:
        if self.arch == "dense":
            return dense_causal()
        if self.arch == "sliding":
            return sliding_window(self.window)
        return sparse_strided(self.chunk_size)


class BaselineModel:
    def __init__(self, cfg: BaselineConfig, rng: RngTree, dtype=np.float32):
        self.cfg = cfg
        d = cfg.block.hidden_size
        self.embed = Tensor(rng.child("embed").normal(
            (cfg.vocab_size, d), 0.02, dtype), requires_grad=True)
        self.core = Transformer(cfg.block, cfg.depth, rng.child("core"), dtype)
        self.head = Tensor(rng.child("head").normal(
            (d, cfg.vocab_size), 0.02, dtype), requires_grad=True)
        self._mask_cache: Dict[int, MaskMatrix] = {}

    def named_params(self) -> Dict[str, Tensor]:
        pairs = [("embed", self.embed), ("head", self.head)]
        pairs.extend(self.core.named_params("core"))
        return collect_params(pairs)

    def mask(self, length: int) -> MaskMatrix:
        if length not in self._mask_cache:
            self._mask_cache[length] = build_mask(self.cfg.mask_spec(), length)
        return self._mask_cache[length]

    def eval_logits(self, tokens: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits, _ = baseline_forward(self, tokens)
        return logits.data


def baseline_forward(model: BaselineModel, tokens: np.ndarray,
                     loss_mask: Optional[np.ndarray] = None,
                     ) -> tuple[Tensor, Tensor]:
    """Causal forward under the arch's mask; returns target-aligned (logits, loss)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    b, n = tokens.shape
    x = T.embedding(model.embed, tokens)
    h = model.core(x, model.mask(n), np.arange(n))
    out_logits = T.matmul(h, model.head)          # row p predicts token p+1
    # shift to target alignment: logits[t] scores token t; row 0 has no predictor
    logits = T.concat([
        Tensor(np.zeros((b, 1, model.cfg.vocab_size), dtype=out_logits.dtype)),
        T.narrow(out_logits, -2, 0, n - 1),
    ], axis=-2)
    full_mask = np.ones((b, n), dtype=bool)
    full_mask[:, 0] = False
    if loss_mask is not None:
        full_mask &= np.atleast_2d(np.asarray(loss_mask, dtype=bool))
    loss = T.cross_entropy(logits, tokens, full_mask)
    if squeeze:
        logits = logits.reshape(logits.shape[1:])
    return logits, loss
