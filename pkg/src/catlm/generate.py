"""Chunk-by-chunk autoregressive generation with a compressed KV cache.

The decoder cache holds one indicator slot, one slot per compressed chunk, and
C slots for the chunk currently being generated. Completed chunks are
compressed eagerly: the moment a chunk fills, it is squeezed into one
representation, the representation's keys/values are written, and the C raw
token entries become dead. Live entries after t context tokens are therefore
1 + floor(t/C) + (t mod C).

This path is written directly against numpy (no gradient tape); the training
forward is its independent correctness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .model import CatModel, chunk, compress_chunks
from .rng import RngTree
from .tensor import np_rmsnorm, np_rope, np_silu, rope_tables


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "greedy"          # "greedy" | "temperature"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "temperature" and not (
                math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("temperature must be finite and positive")


@dataclass
class TraceEntry:
    """Cache occupancy after the state for context length ``t`` has settled."""

    t: int
    live_entries: int
    attended_keys: int
    reps_filled: int
    chunk_tokens_filled: int


class CacheError(RuntimeError):
    pass


class DecoderCache:
    """Per-layer key/value store: [indicator | rep slots | current-chunk slots].

    ``audit_zero_dead`` physically zeroes evicted chunk-token entries at each
    rollover so tests can prove they are never read.
    """

    def __init__(self, model: CatModel, c: int, max_total_tokens: int,
                 audit_zero_dead: bool = False):
        cfg = model.cfg
        if c not in cfg.chunk_sizes:
            cfg.chunk_index(c)  # raises with the supported list
        self.c = c
        self.max_chunks = max_total_tokens // c
        self.capacity = 1 + self.max_chunks + c
        dec = cfg.decoder
        depth = cfg.decoder_depth
        self.k = np.zeros((depth, self.capacity, dec.num_heads, dec.head_dim), np.float32)
        self.v = np.zeros_like(self.k)
        self.reps_filled = 0
        self.chunk_tokens_filled = 0
        self.tokens_total = 0
        self.current_chunk: List[int] = []
        self.last_logits: Optional[np.ndarray] = None
        self.last_span = 0
        self.primed = False
        self.audit_zero_dead = audit_zero_dead

    def live_entries(self) -> int:
        return (1 if self.primed else 0) + self.reps_filled + self.chunk_tokens_filled

    def chunk_slot(self, j: int) -> int:
        return 1 + self.max_chunks + j

    def live_slots(self, include_chunk: bool) -> np.ndarray:
        slots = ([0] if self.primed else []) + list(range(1, 1 + self.reps_filled))
        if include_chunk:
            slots += [self.chunk_slot(j) for j in range(self.chunk_tokens_filled)]
        return np.asarray(slots, dtype=np.int64)


def _token_position(cache: DecoderCache, j: Optional[int] = None) -> int:
    """Interleaved position of current-chunk token j (defaults to the next one)."""
    if j is None:
        j = cache.chunk_tokens_filled
    return 1 + cache.reps_filled * (cache.c + 1) + j


def _rep_position(cache: DecoderCache, k: int) -> int:
    return k * (cache.c + 1)


def _rows_forward(model: CatModel, cache: DecoderCache, rows: np.ndarray,
                  positions: np.ndarray, slots: np.ndarray,
                  attend_chunk: bool, causal_within: bool) -> np.ndarray:
    """Run the decoder over ``rows`` (M, D), writing K/V into ``slots``.

    Each row attends the already-live cache region plus the block of new rows
    up to itself (``causal_within``); rep rows never see current-chunk slots
    (``attend_chunk=False``).
    """
    cfg = model.cfg.decoder
    eps = cfg.norm_eps
    m, d = rows.shape
    h_heads, hd = cfg.num_heads, cfg.head_dim
    cos, sin = rope_tables(positions, hd, base=cfg.rope_base)
    prior = cache.live_slots(include_chunk=attend_chunk)
    n_prior = len(prior)
    if causal_within:
        within = np.tril(np.ones((m, m), dtype=bool))
    else:
        within = np.eye(m, dtype=bool)
    mask = np.concatenate([np.ones((m, n_prior), dtype=bool), within], axis=1)
    h = rows
    for li, blk in enumerate(model.decoder.blocks):
        a_in = np_rmsnorm(h, blk.norm_attn.data, eps)
        q = np_rope((a_in @ blk.attn.wq.data).reshape(m, h_heads, hd).swapaxes(0, 1), cos, sin)
        knew = np_rope((a_in @ blk.attn.wk.data).reshape(m, h_heads, hd).swapaxes(0, 1), cos, sin)
        vnew = (a_in @ blk.attn.wv.data).reshape(m, h_heads, hd).swapaxes(0, 1)
        cache.k[li, slots] = knew.swapaxes(0, 1)
        cache.v[li, slots] = vnew.swapaxes(0, 1)
        kk = np.concatenate([cache.k[li, prior].swapaxes(0, 1), knew], axis=1)
        vv = np.concatenate([cache.v[li, prior].swapaxes(0, 1), vnew], axis=1)
        scores = (q @ kk.swapaxes(-1, -2)) / math.sqrt(hd)
        scores = np.where(mask, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        attn = (probs @ vv).swapaxes(0, 1).reshape(m, d) @ blk.attn.wo.data
        h = h + attn
        x = np_rmsnorm(h, blk.norm_mlp.data, eps)
        h = h + (np_silu(x @ blk.mlp.w_gate.data) * (x @ blk.mlp.w_up.data)) @ blk.mlp.w_down.data
    final = np_rmsnorm(h, model.decoder.norm_final.data, eps)
    logits = final @ model.head.data
    cache.last_span = n_prior + m  # keys seen by the final (predictor) row
    return logits


def _compress_one(model: CatModel, token_ids: np.ndarray, c: int) -> np.ndarray:
    with T.no_grad():
        reps = compress_chunks(model, chunk(token_ids, c, model.cfg.pad_id))
    return reps.data[0]


def prefill(model: CatModel, cache: DecoderCache, prompt: np.ndarray) -> np.ndarray:
    """Prime the cache from a prompt; returns next-token logits.

    Full chunks are compressed in parallel and enter as representation rows;
    a trailing partial chunk enters as raw token rows.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or len(prompt) < 1:
        raise ValueError("prompt must be a nonempty 1-D token array")
    if cache.primed:
        raise CacheError("cache already primed")
    c = cache.c
    if len(prompt) > cache.max_chunks * c + (c - 1):
        raise CacheError(
            f"prompt of {len(prompt)} tokens exceeds cache capacity "
            f"({cache.max_chunks} chunks of {c})")
    k_full, m = divmod(len(prompt), c)
    cfg = model.cfg
    idx = cfg.chunk_index(c)
    rows = [model.indicator_dec.data[idx]]
    positions = [0]
    slots = [0]
    if k_full:
        reps = _compress_one(model, prompt[:k_full * c], c)
        for j in range(k_full):
            rows.append(reps[j])
            positions.append(_rep_position(cache, j + 1))
            slots.append(1 + j)
    logits = _rows_forward(model, cache, np.stack(rows),
                           np.asarray(positions), np.asarray(slots),
                           attend_chunk=False, causal_within=True)
    cache.primed = True
    cache.reps_filled = k_full
    if m:
        tok_rows = model.embed_g.data[prompt[k_full * c:]]
        positions = [_token_position(cache, j) for j in range(m)]
        slots = [cache.chunk_slot(j) for j in range(m)]
        logits = _rows_forward(model, cache, tok_rows,
                               np.asarray(positions), np.asarray(slots),
                               attend_chunk=True, causal_within=True)
        cache.chunk_tokens_filled = m
        cache.current_chunk = list(prompt[k_full * c:])
    cache.tokens_total = len(prompt)
    cache.last_logits = logits[-1]
    return cache.last_logits


def _sample(logits: np.ndarray, sampler: SamplerConfig,
            gen: Optional[np.random.Generator]) -> int:
    if sampler.mode == "greedy":
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / sampler.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(gen.choice(len(p), p=p))


def decode_token(model: CatModel, cache: DecoderCache, sampler: SamplerConfig,
                 gen: Optional[np.random.Generator] = None) -> int:
    """Sample the next token and absorb it into the current-chunk region."""
    if cache.last_logits is None:
        raise CacheError("cache not primed")
    if cache.chunk_tokens_filled >= cache.c:
        raise CacheError("internal invariant violation: chunk region full; rollover missed")
    token = _sample(cache.last_logits, sampler, gen)
    row = model.embed_g.data[token][None, :]
    pos = np.asarray([_token_position(cache)])
    slot = np.asarray([cache.chunk_slot(cache.chunk_tokens_filled)])
    logits = _rows_forward(model, cache, row, pos, slot,
                           attend_chunk=True, causal_within=True)
    cache.chunk_tokens_filled += 1
    cache.tokens_total += 1
    cache.current_chunk.append(token)
    cache.last_logits = logits[-1]
    return token


def rollover_chunk(model: CatModel, cache: DecoderCache) -> None:
    """Compress the completed chunk into its rep slot and retire its raw entries."""
    if cache.chunk_tokens_filled != cache.c:
        raise CacheError(
            f"rollover requires a complete chunk; have {cache.chunk_tokens_filled}/{cache.c}")
    if cache.reps_filled >= cache.max_chunks:
        raise CacheError("cache rep slots exhausted")
    rep = _compress_one(model, np.asarray(cache.current_chunk, dtype=np.int64), cache.c)[0]
    k_next = cache.reps_filled + 1
    pos = np.asarray([_rep_position(cache, k_next)])
    slot = np.asarray([k_next])
    logits = _rows_forward(model, cache, rep[None, :], pos, slot,
                           attend_chunk=False, causal_within=True)
    cache.reps_filled = k_next
    cache.chunk_tokens_filled = 0
    cache.current_chunk = []
    if cache.audit_zero_dead:
        cache.k[:, 1 + cache.max_chunks:] = 0.0
        cache.v[:, 1 + cache.max_chunks:] = 0.0
    cache.last_logits = logits[-1]


def generate(model: CatModel, prompt: np.ndarray, num_tokens: int, c: int,
             sampler: SamplerConfig = SamplerConfig(),
             audit_zero_dead: bool = False,
             ) -> tuple[np.ndarray, List[TraceEntry]]:
    """Generate ``num_tokens`` after ``prompt`` with a compressed cache.

    Returns the continuation and a per-step occupancy trace (one entry per
    context length t, recorded after any due chunk rollover).
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    total = len(prompt) + num_tokens
    cache = DecoderCache(model, c, max_total_tokens=total, audit_zero_dead=audit_zero_dead)
    gen_rng = RngTree(sampler.seed).child("sample").generator() \
        if sampler.mode == "temperature" else None
    prefill(model, cache, prompt)
    if cache.chunk_tokens_filled == cache.c:  # unreachable: prefill compresses full chunks
        rollover_chunk(model, cache)
    trace = [TraceEntry(cache.tokens_total, cache.live_entries(), cache.last_span,
                        cache.reps_filled, cache.chunk_tokens_filled)]
    out = []
    for _ in range(num_tokens):
        out.append(decode_token(model, cache, sampler, gen_rng))
        if cache.chunk_tokens_filled == cache.c:
            rollover_chunk(model, cache)
        trace.append(TraceEntry(cache.tokens_total, cache.live_entries(), cache.last_span,
                                cache.reps_filled, cache.chunk_tokens_filled))
    return np.asarray(out, dtype=np.int64), trace
