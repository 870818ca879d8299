"""The chunk-compression mechanism packaged as a drop-in sequence-mixer layer.

Per layer: up-project the incoming states to twice the width, compress each
chunk of C up-projected states to one vector with a plain linear projection,
run masked attention over the indicator-free interleaved sequence, keep the
token-row outputs, and down-project. Stackable wherever a causal attention
layer would go; decoding from compressed context gets the extra width it
needs inside the layer itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, SwigluMlp, collect_params
from .masks import InterleaveLayout, MaskMatrix, build_mask, cat_interleaved
from .rng import RngTree
from .tensor import Tensor

__all__ = ["CatLayerConfig", "CatLayerMixer", "CatLayerModel", "cat_layer_forward"]


@dataclass(frozen=True)
class CatLayerConfig:
    vocab_size: int
    pad_id: int
    width: int            # model width D; the mixer works internally at 2D
    depth: int
    num_heads: int
    chunk_size: int
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.chunk_size < 2:
            raise ValueError("chunk size must be >= 2")
        if (2 * self.width) % self.num_heads != 0:
            raise ValueError("num_heads must divide 2 * width")


class CatLayerMixer:
    """One compress-and-attend sequence mixer at internal width 2D."""

    def __init__(self, cfg: CatLayerConfig, rng: RngTree, dtype=np.float32):
        self.cfg = cfg
        d, wide = cfg.width, 2 * cfg.width
        c = cfg.chunk_size
        std = 0.02
        self.w_up = Tensor(rng.child("w_up").normal((d, wide), std, dtype), requires_grad=True)
        self.w_chunk = Tensor(rng.child("w_chunk").normal(
            (c * wide, wide), std, dtype), requires_grad=True)
        self.wq = Tensor(rng.child("wq").normal((wide, wide), std, dtype), requires_grad=True)
        self.wk = Tensor(rng.child("wk").normal((wide, wide), std, dtype), requires_grad=True)
        self.wv = Tensor(rng.child("wv").normal((wide, wide), std, dtype), requires_grad=True)
        self.wo = Tensor(rng.child("wo").normal((wide, wide), std, dtype), requires_grad=True)
        self.w_down = Tensor(rng.child("w_down").normal((wide, d), std, dtype), requires_grad=True)

    def named_params(self, prefix: str):
        for name in ("w_up", "w_chunk", "wq", "wk", "wv", "wo", "w_down"):
            yield f"{prefix}.{name}", getattr(self, name)


_LAYOUT_CACHE: Dict[tuple, tuple[InterleaveLayout, MaskMatrix]] = {}


def _layer_layout(num_chunks: int, c: int) -> tuple[InterleaveLayout, MaskMatrix]:
    key = (num_chunks, c)
    if key not in _LAYOUT_CACHE:
        layout = InterleaveLayout.build(num_chunks, c, with_indicator=False)
        mask = build_mask(cat_interleaved(c), layout.total_length, layout)
        _LAYOUT_CACHE[key] = (layout, mask)
    return _LAYOUT_CACHE[key]


def cat_layer_forward(mixer: CatLayerMixer, x: Tensor, c: int) -> Tensor:
    """Mix a (B, N, D) sequence through compress-and-attend; returns (B, N, D).

    The output at a position depends on earlier positions of its own chunk and
    on whole earlier chunks only through their compressed vectors.
    """
    cfg = mixer.cfg
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    b, n, d = x.shape
    if n % c != 0:
        raise T.ShapeError(f"sequence length {n} not divisible by chunk size {c}")
    k = n // c
    wide = 2 * cfg.width
    up = T.matmul(x, mixer.w_up)                                # (B, N, 2D)
    reps = T.matmul(up.reshape((b, k, c * wide)), mixer.w_chunk)  # (B, K, 2D)
    layout, mask = _layer_layout(k, c)
    seq = T.assemble_rows(
        [(up, layout.token_positions()), (reps, layout.rep_positions())],
        layout.total_length)
    t_len = layout.total_length
    h, hd = cfg.num_heads, wide // cfg.num_heads
    positions = np.arange(t_len)

    def heads(w):
        y = T.matmul(seq, w).reshape((b, t_len, h, hd))
        return y.transpose((0, 2, 1, 3))

    cos, sin = T.rope_tables(positions, hd, base=cfg.rope_base, dtype=x.dtype.type)
    q = T.rope_rotate(heads(mixer.wq), cos, sin)
    kk = T.rope_rotate(heads(mixer.wk), cos, sin)
    v = heads(mixer.wv)
    scores = T.matmul(q, kk.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    probs = T.masked_softmax(scores, mask.allowed, neg_bias=mask.neg_bias)
    mixed = T.matmul(probs, v).transpose((0, 2, 1, 3)).reshape((b, t_len, wide))
    mixed = T.matmul(mixed, mixer.wo)
    tok_out = T.take_rows(mixed, layout.token_positions(), axis=-2)   # (B, N, 2D)
    out = T.matmul(tok_out, mixer.w_down)
    return out.reshape((n, d)) if squeeze else out


class CatLayerModel:
    """Byte/token LM whose attention layers are compress-and-attend mixers."""

    def __init__(self, cfg: CatLayerConfig, rng: RngTree, dtype=np.float32):
        self.cfg = cfg
        d = cfg.width
        block_cfg = BlockConfig(hidden_size=d, num_heads=max(1, cfg.num_heads // 2),
                                norm_eps=cfg.norm_eps)
        self.embed = Tensor(rng.child("embed").normal(
            (cfg.vocab_size, d), 0.02, dtype), requires_grad=True)
        self.mixers = [CatLayerMixer(cfg, rng.child(f"mixer{i}"), dtype)
                       for i in range(cfg.depth)]
        self.mlps = [SwigluMlp(block_cfg, rng.child(f"mlp{i}"), dtype)
                     for i in range(cfg.depth)]
        self.norm_mix = [Tensor(np.ones(d, dtype=dtype), requires_grad=True)
                         for _ in range(cfg.depth)]
        self.norm_mlp = [Tensor(np.ones(d, dtype=dtype), requires_grad=True)
                         for _ in range(cfg.depth)]
        self.norm_final = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.head = Tensor(rng.child("head").normal(
            (d, cfg.vocab_size), 0.02, dtype), requires_grad=True)

    def named_params(self) -> Dict[str, Tensor]:
        pairs = [("embed", self.embed), ("head", self.head),
                 ("norm_final", self.norm_final)]
        for i in range(self.cfg.depth):
            pairs.extend(self.mixers[i].named_params(f"mixer{i}"))
            pairs.extend(self.mlps[i].named_params(f"mlp{i}"))
            pairs.append((f"norm_mix{i}", self.norm_mix[i]))
            pairs.append((f"norm_mlp{i}", self.norm_mlp[i]))
        return collect_params(pairs)

    def forward(self, tokens: np.ndarray,
                loss_mask: np.ndarray = None) -> tuple[Tensor, Tensor]:
        """Target-aligned (logits, loss), shifted like the mask baselines."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        b, n = tokens.shape
        cfg = self.cfg
        h = T.embedding(self.embed, tokens)
        for i in range(cfg.depth):
            h = h + cat_layer_forward(
                self.mixers[i], T.rmsnorm(h, self.norm_mix[i], cfg.norm_eps),
                cfg.chunk_size)
            h = h + self.mlps[i](T.rmsnorm(h, self.norm_mlp[i], cfg.norm_eps))
        h = T.rmsnorm(h, self.norm_final, cfg.norm_eps)
        out_logits = T.matmul(h, self.head)
        logits = T.concat([
            Tensor(np.zeros((b, 1, cfg.vocab_size), dtype=out_logits.dtype)),
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

    def eval_logits(self, tokens: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits, _ = self.forward(tokens)
        return logits.data
