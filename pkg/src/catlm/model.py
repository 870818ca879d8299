"""Chunk-compressing transformer: chunking, parallel compression, interleaved
masked training, the sequential reference forward, and adaptive chunk sizes.

The model has two dense transformers: a bidirectional compressor that maps
each chunk of C tokens to one vector, and a causal decoder that predicts the
tokens of a chunk given earlier tokens of that chunk plus the compressed
representations of all earlier chunks. Training runs the decoder once over an
interleaved sequence [indicator, c_1, rep_1, c_2, rep_2, ...] under a custom
mask; ``forward_train_naive`` decodes chunk by chunk instead and is the
correctness oracle the masked path must reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, Transformer, collect_params
from .masks import (InterleaveLayout, MaskMatrix, bidirectional, build_mask,
                    cat_interleaved, dense_causal)
from .optim import OptimizerState, adamw_step, zero_grads
from .rng import RngTree
from .tensor import Tensor

__all__ = [
    "CatModelConfig",
    "CatModel",
    "ChunkedSequence",
    "chunk",
    "interpolate_projection",
    "compress_chunks",
    "build_interleaved",
    "forward_train",
    "forward_train_naive",
    "adaptive_train_step",
]


@dataclass(frozen=True)
class CatModelConfig:
    vocab_size: int
    pad_id: int
    chunk_sizes: tuple[int, ...]
    compressor: BlockConfig
    compressor_depth: int
    decoder: BlockConfig
    decoder_depth: int

    def __post_init__(self):
        if not self.chunk_sizes:
            raise ValueError("need at least one chunk size")
        sizes = tuple(sorted(set(int(c) for c in self.chunk_sizes)))
        if sizes != tuple(self.chunk_sizes):
            raise ValueError("chunk_sizes must be sorted and unique")
        if sizes[0] < 2:
            raise ValueError("chunk sizes must be >= 2")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ValueError("pad_id must be a valid vocab id")

    @property
    def c_ref(self) -> int:
        return max(self.chunk_sizes)

    @property
    def d_f(self) -> int:
        return self.compressor.hidden_size

    @property
    def d_g(self) -> int:
        return self.decoder.hidden_size

    def chunk_index(self, c: int) -> int:
        try:
            return self.chunk_sizes.index(c)
        except ValueError:
            raise ValueError(
                f"chunk size {c} unsupported; this model supports {list(self.chunk_sizes)}"
            ) from None


def default_config(vocab_size: int, pad_id: int, width: int, depth: int,
                   chunk_sizes: Sequence[int] = (4, 8, 16, 32),
                   heads: int = 2, decoder_width: Optional[int] = None,
                   compressor_depth: Optional[int] = None) -> CatModelConfig:
    """Sizing rule: decoder at depth L and 2x width, shallow compressor at L/4."""
    d_g = 2 * width if decoder_width is None else decoder_width
    return CatModelConfig(
        vocab_size=vocab_size,
        pad_id=pad_id,
        chunk_sizes=tuple(sorted(set(chunk_sizes))),
        compressor=BlockConfig(hidden_size=width, num_heads=heads),
        compressor_depth=max(1, depth // 4) if compressor_depth is None else compressor_depth,
        decoder=BlockConfig(hidden_size=d_g, num_heads=heads),
        decoder_depth=depth,
    )


@dataclass
class ChunkedSequence:
    """A (possibly padded) token sequence viewed as rows of C tokens."""

    tokens: np.ndarray          # (B, N_padded) int64
    chunk_size: int
    orig_len: int
    pad_mask: np.ndarray        # (B, N_padded) bool, True at real tokens

    @property
    def num_chunks(self) -> int:
        return self.tokens.shape[-1] // self.chunk_size

    @property
    def padded_len(self) -> int:
        return self.tokens.shape[-1]

    @property
    def chunks(self) -> np.ndarray:
        b = self.tokens.shape[0]
        return self.tokens.reshape(b, self.num_chunks, self.chunk_size)


def chunk(tokens: np.ndarray, c: int, pad_id: int) -> ChunkedSequence:
    """Split into chunks of ``c`` tokens, right-padding to a multiple of ``c``.

    Pad positions are excluded from the loss via ``pad_mask``.
    """
    if c < 2:
        raise ValueError("chunk size must be >= 2")
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[-1] == 0:
        raise ValueError("tokens must be a nonempty 1-D or 2-D integer array")
    b, n = tokens.shape
    pad = (-n) % c
    if pad:
        tokens = np.concatenate(
            [tokens, np.full((b, pad), pad_id, dtype=np.int64)], axis=1)
    mask = np.zeros_like(tokens, dtype=bool)
    mask[:, :n] = True
    return ChunkedSequence(tokens=tokens, chunk_size=c, orig_len=n, pad_mask=mask)


class CatModel:
    """Compressor + decoder weights, projection bank, indicator/marker embeddings."""

    def __init__(self, cfg: CatModelConfig, rng: RngTree, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        s = len(cfg.chunk_sizes)
        std = 0.02
        self.embed_f = Tensor(rng.child("embed_f").normal(
            (cfg.vocab_size, cfg.d_f), std, dtype), requires_grad=True)
        self.embed_g = Tensor(rng.child("embed_g").normal(
            (cfg.vocab_size, cfg.d_g), std, dtype), requires_grad=True)
        # indicator: one learned vector per supported chunk size, on both sides
        self.indicator_comp = Tensor(rng.child("indicator_comp").normal(
            (s, cfg.d_f), std, dtype), requires_grad=True)
        self.indicator_dec = Tensor(rng.child("indicator_dec").normal(
            (s, cfg.d_g), std, dtype), requires_grad=True)
        # marker: a single vector shared across chunk sizes, added to every rep
        self.marker = Tensor(rng.child("marker").normal(
            (cfg.d_g,), std, dtype), requires_grad=True)
        self.proj_base = Tensor(rng.child("proj_base").normal(
            (cfg.c_ref * cfg.d_f, cfg.d_g), std, dtype), requires_grad=True)
        self.compressor = Transformer(cfg.compressor, cfg.compressor_depth,
                                      rng.child("compressor"), dtype)
        self.decoder = Transformer(cfg.decoder, cfg.decoder_depth,
                                   rng.child("decoder"), dtype)
        self.head = Tensor(rng.child("head").normal(
            (cfg.d_g, cfg.vocab_size), std, dtype), requires_grad=True)
        self._mask_cache: Dict[tuple, MaskMatrix] = {}

    def named_params(self) -> Dict[str, Tensor]:
        pairs: list[tuple[str, Tensor]] = [
            ("embed_f", self.embed_f),
            ("embed_g", self.embed_g),
            ("indicator_comp", self.indicator_comp),
            ("indicator_dec", self.indicator_dec),
            ("marker", self.marker),
            ("proj_base", self.proj_base),
            ("head", self.head),
        ]
        pairs.extend(self.compressor.named_params("compressor"))
        pairs.extend(self.decoder.named_params("decoder"))
        return collect_params(pairs)

    def mask_for(self, spec_key: tuple, make) -> MaskMatrix:
        if spec_key not in self._mask_cache:
            self._mask_cache[spec_key] = make()
        return self._mask_cache[spec_key]


def interpolation_weights(c: int, c_ref: int, dtype=np.float32) -> np.ndarray:
    """(c, c_ref) matrix of convex row weights resampling slot blocks.

    Endpoints map to endpoints; c == c_ref yields the identity.
    """
    if not 2 <= c <= c_ref:
        raise ValueError(f"chunk size {c} outside [2, {c_ref}]")
    w = np.zeros((c, c_ref), dtype=np.float64)
    for s in range(c):
        u = s * (c_ref - 1) / (c - 1)
        lo = int(np.floor(u))
        frac = u - lo
        if lo >= c_ref - 1:
            w[s, c_ref - 1] = 1.0
        else:
            w[s, lo] = 1.0 - frac
            w[s, lo + 1] = frac
    return w.astype(dtype)


def interpolate_projection(base: Tensor, c: int, c_ref: int, d_f: int) -> Tensor:
    """Resample the (c_ref * d_f, d_g) projection bank to (c * d_f, d_g).

    Linear interpolation over the slot index, differentiable through to the
    base matrix so all chunk sizes train one shared bank.
    """
    d_g = base.shape[-1]
    if base.shape != (c_ref * d_f, d_g):
        raise T.ShapeError(f"projection bank shape {base.shape} != {(c_ref * d_f, d_g)}")
    if c == c_ref:
        return base
    w = Tensor(interpolation_weights(c, c_ref, dtype=base.dtype))
    blocks = base.reshape((c_ref, d_f * d_g))
    return T.matmul(w, blocks).reshape((c * d_f, d_g))


def compress_chunks(model: CatModel, chunked: ChunkedSequence,
                    reps_override: Optional[Dict[int, np.ndarray]] = None) -> Tensor:
    """Independently compress every chunk into one decoder-width vector.

    Each chunk runs through the bidirectional compressor (token embeddings plus
    the chunk-size indicator), its C output vectors are concatenated and sent
    through the interpolated projection, and the shared marker embedding is
    added to the result. Chunks are processed as one batched map with no
    cross-chunk dependence. ``reps_override`` force-injects fixed vectors for
    selected chunk indices (information-bottleneck probes).
    """
    cfg = model.cfg
    c = chunked.chunk_size
    idx = cfg.chunk_index(c)
    b = chunked.tokens.shape[0]
    k = chunked.num_chunks
    flat = chunked.chunks.reshape(b * k, c)
    emb = T.embedding(model.embed_f, flat)
    ind = T.take_rows(model.indicator_comp, np.array([idx]), axis=0).reshape((1, 1, cfg.d_f))
    x = emb + ind
    mask = model.mask_for(("bidir", c), lambda: build_mask(bidirectional(), c))
    positions = np.arange(c)
    out = model.compressor(x, mask, positions)            # (B*K, C, D_f)
    flat_out = out.reshape((b * k, c * cfg.d_f))
    proj = interpolate_projection(model.proj_base, c, cfg.c_ref, cfg.d_f)
    reps = T.matmul(flat_out, proj) + model.marker        # (B*K, D_g)
    reps = reps.reshape((b, k, cfg.d_g))
    if reps_override:
        data = reps.data.copy()
        for ci, vec in reps_override.items():
            data[:, ci, :] = vec
        reps = Tensor(data)  # detached on purpose: injected reps carry no grads
    return reps


def build_interleaved(model: CatModel, chunked: ChunkedSequence, reps: Tensor,
                      ) -> tuple[Tensor, InterleaveLayout, MaskMatrix]:
    """Interleave [indicator, chunk tokens, rep, ...] and build the decoder mask."""
    cfg = model.cfg
    c = chunked.chunk_size
    k = chunked.num_chunks
    if reps.shape[-2] != k:
        raise T.ShapeError(f"got {reps.shape[-2]} reps for {k} chunks")
    layout = InterleaveLayout.build(k, c, with_indicator=True)
    mask = model.mask_for(
        ("cat", c, k, True),
        lambda: build_mask(cat_interleaved(c), layout.total_length, layout))
    tok_emb = T.embedding(model.embed_g, chunked.tokens)   # (B, N, D_g)
    ind = T.take_rows(model.indicator_dec, np.array([cfg.chunk_index(c)]),
                      axis=0).reshape((1, 1, cfg.d_g))
    x = T.assemble_rows(
        [(ind, np.array([layout.indicator_index])),
         (tok_emb, layout.token_positions()),
         (reps, layout.rep_positions())],
        layout.total_length)
    return x, layout, mask


def _predictor_rows(layout: InterleaveLayout) -> np.ndarray:
    """Interleaved row whose output predicts token t, for t = 0..N-1.

    Mid-chunk tokens are predicted from the previous token's row, each chunk's
    first token from the previous chunk's rep slot, and the very first token
    from the indicator slot.
    """
    ctx = layout.context_row_positions()
    return np.concatenate([[layout.indicator_index], ctx[:-1]])


def forward_train(model: CatModel, tokens: np.ndarray, c: int,
                  loss_mask: Optional[np.ndarray] = None,
                  reps_override: Optional[Dict[int, np.ndarray]] = None,
                  ) -> tuple[Tensor, Tensor]:
    """One masked decoder pass over the interleaved sequence.

    Returns ``(logits, loss)`` where ``logits[..., t, :]`` scores token t of
    the (padded) sequence, read from its predictor row. Loss averages over
    non-pad positions intersected with ``loss_mask`` when given.
    """
    cfg = model.cfg
    squeeze = np.asarray(tokens).ndim == 1
    chunked = chunk(tokens, c, cfg.pad_id)
    reps = compress_chunks(model, chunked, reps_override)
    x, layout, mask = build_interleaved(model, chunked, reps)
    positions = np.arange(layout.total_length)
    h = model.decoder(x, mask, positions)
    rows = T.take_rows(h, _predictor_rows(layout), axis=-2)   # (B, N, D_g)
    logits = T.matmul(rows, model.head)
    full_mask = chunked.pad_mask
    if loss_mask is not None:
        user = np.zeros_like(full_mask)
        user[:, :chunked.orig_len] = np.atleast_2d(loss_mask)
        full_mask = full_mask & user
    loss = T.cross_entropy(logits, chunked.tokens, full_mask)
    if squeeze:
        logits = logits.reshape(logits.shape[1:])
    return logits, loss


def forward_train_naive(model: CatModel, tokens: np.ndarray, c: int) -> Tensor:
    """Sequential reference decode: one short causal pass per chunk.

    Chunk i's pass sees [indicator, rep_1 .. rep_{i-1}, chunk-i tokens] under a
    plain causal mask, using the same position indices the interleaved layout
    assigns those rows. Slow by construction; it exists as the oracle the
    masked single-pass forward must match.
    """
    cfg = model.cfg
    squeeze = np.asarray(tokens).ndim == 1
    chunked = chunk(tokens, c, cfg.pad_id)
    b, k = chunked.tokens.shape[0], chunked.num_chunks
    reps = compress_chunks(model, chunked)
    tok_emb = T.embedding(model.embed_g, chunked.tokens)
    ind = T.take_rows(model.indicator_dec, np.array([cfg.chunk_index(c)]),
                      axis=0).reshape((1, 1, cfg.d_g)) + Tensor(
        np.zeros((b, 1, cfg.d_g), dtype=tok_emb.dtype))
    layout = InterleaveLayout.build(k, c, with_indicator=True)
    tok_pos = layout.token_positions()
    rep_pos = layout.rep_positions()
    chunk_logit_list = []
    for i in range(k):
        parts = [ind]
        positions = [0]
        if i > 0:
            parts.append(T.narrow(reps, -2, 0, i))
            positions.extend(rep_pos[:i])
        parts.append(T.narrow(tok_emb, -2, i * c, c))
        positions.extend(tok_pos[i * c:(i + 1) * c])
        seq = T.concat(parts, axis=-2)
        t_len = 1 + i + c
        mask = model.mask_for(("dense", t_len),
                              lambda: build_mask(dense_causal(), t_len))
        h = model.decoder(seq, mask, np.asarray(positions))
        # rows i .. i+c-1 predict this chunk's tokens 1..c
        rows = T.narrow(h, -2, i, c)
        chunk_logit_list.append(T.matmul(rows, model.head))
    logits = T.concat(chunk_logit_list, axis=-2)
    if squeeze:
        logits = logits.reshape(logits.shape[1:])
    return logits


def forward_loss(model: CatModel, tokens: np.ndarray, c: int,
                 loss_mask: Optional[np.ndarray] = None) -> Tensor:
    return forward_train(model, tokens, c, loss_mask)[1]


def adaptive_train_step(model: CatModel, batch: np.ndarray, rng: RngTree,
                        opt: OptimizerState,
                        loss_mask: Optional[np.ndarray] = None,
                        ) -> tuple[float, int]:
    """Sample a chunk size uniformly, run one forward/backward, apply AdamW.

    Returns (loss value, chosen chunk size).
    """
    sizes = model.cfg.chunk_sizes
    c = int(sizes[rng.generator().integers(0, len(sizes))])
    params = model.named_params()
    zero_grads(params)
    loss = forward_loss(model, batch, c, loss_mask)
    val = loss.item()
    if not np.isfinite(val):
        raise T.NonFiniteError("training loss is not finite")
    loss.backward()
    adamw_step(params, opt)
    return val, c
