"""Boolean attention-mask constructors for all supported architectures.

Four causal families (dense, sliding-window, strided-sparse, chunk-interleaved)
plus the bidirectional mask used by the chunk compressor. The interleaved mask
operates on a sequence where each chunk of C tokens is followed by one
compressed-representation slot, optionally preceded by a single indicator slot
at index 0:

    [indicator, c_1 tokens, rep_1, c_2 tokens, rep_2, ...]

Interleaved mask rules:
  * a token row sees earlier tokens of its own chunk, itself, and every
    representation slot of earlier chunks -- never a raw token of another chunk;
  * a representation row sees earlier representation rows and itself -- never
    any raw token row;
  * when an indicator slot is present, every row may additionally see it, and
    the indicator row sees only itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "MaskSpec",
    "MaskMatrix",
    "InterleaveLayout",
    "build_mask",
    "dense_causal",
    "sliding_window",
    "sparse_strided",
    "cat_interleaved",
    "bidirectional",
]

KINDS = ("dense_causal", "sliding_window", "sparse_strided", "cat_interleaved", "bidirectional")


@dataclass(frozen=True)
class MaskSpec:
    """Symbolic description of an attention mask."""

    kind: str
    window: Optional[int] = None       # sliding_window
    chunk_size: Optional[int] = None   # sparse_strided / cat_interleaved

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "sliding_window" and (self.window is None or self.window < 1):
            raise ValueError("sliding_window requires window >= 1")
        if self.kind in ("sparse_strided", "cat_interleaved") and \
                (self.chunk_size is None or self.chunk_size < 2):
            raise ValueError(f"{self.kind} requires chunk_size >= 2")


def dense_causal() -> MaskSpec:
    return MaskSpec("dense_causal")


def sliding_window(window: int) -> MaskSpec:
    return MaskSpec("sliding_window", window=window)


def sparse_strided(chunk_size: int) -> MaskSpec:
    return MaskSpec("sparse_strided", chunk_size=chunk_size)


def cat_interleaved(chunk_size: int) -> MaskSpec:
    return MaskSpec("cat_interleaved", chunk_size=chunk_size)


def bidirectional() -> MaskSpec:
    return MaskSpec("bidirectional")


class MaskMatrix:
    """A lazily materialized boolean (length x length) attention mask.

    ``allowed[q, k]`` is True when query row q may attend key column k.
    Materialization validates that every row keeps at least one allowed entry.
    """

    def __init__(self, length: int, builder: Callable[[], np.ndarray],
                 causal: bool = True):
        self.length = length
        self.causal = causal
        self._builder = builder
        self._allowed: Optional[np.ndarray] = None
        self._neg_bias: Optional[np.ndarray] = None

    @property
    def allowed(self) -> np.ndarray:
        if self._allowed is None:
            m = np.asarray(self._builder(), dtype=bool)
            if m.shape != (self.length, self.length):
                raise ValueError(f"mask builder produced shape {m.shape}, "
                                 f"expected {(self.length, self.length)}")
            if not m.any(axis=1).all():
                bad = int(np.flatnonzero(~m.any(axis=1))[0])
                raise ValueError(f"mask row {bad} has no allowed entries")
            self._allowed = m
        return self._allowed

    def allowed_count(self) -> int:
        return int(self.allowed.sum())

    def row_counts(self) -> np.ndarray:
        return self.allowed.sum(axis=1)

    @property
    def neg_bias(self) -> np.ndarray:
        """Additive float32 form: 0 where allowed, -inf where blocked."""
        if self._neg_bias is None:
            a = self.allowed
            self._neg_bias = np.where(a, np.float32(0), np.float32(-np.inf))
        return self._neg_bias


@dataclass(frozen=True)
class InterleaveLayout:
    """Position bookkeeping for the chunk-interleaved decoder sequence.

    With an indicator the layout is [ind, c_1, rep_1, ..., c_K, rep_K] of
    total length 1 + N + K; without (the per-layer variant) the indicator slot
    is dropped. ``chunk_of_position`` is the 0-based chunk index of each
    position (-1 for the indicator).
    """

    num_chunks: int
    chunk_size: int
    with_indicator: bool
    total_length: int
    is_rep_slot: np.ndarray = field(repr=False)     # bool, True at rep slots
    is_token_slot: np.ndarray = field(repr=False)   # bool, True at raw-token slots
    chunk_of_position: np.ndarray = field(repr=False)
    indicator_index: Optional[int]

    @staticmethod
    def build(num_chunks: int, chunk_size: int, with_indicator: bool = True) -> "InterleaveLayout":
        if num_chunks < 1 or chunk_size < 1:
            raise ValueError("num_chunks and chunk_size must be positive")
        offset = 1 if with_indicator else 0
        total = offset + num_chunks * (chunk_size + 1)
        is_rep = np.zeros(total, dtype=bool)
        is_tok = np.zeros(total, dtype=bool)
        chunk_of = np.full(total, -1, dtype=np.int64)
        for c in range(num_chunks):
            start = offset + c * (chunk_size + 1)
            is_tok[start:start + chunk_size] = True
            chunk_of[start:start + chunk_size] = c
            is_rep[start + chunk_size] = True
            chunk_of[start + chunk_size] = c
        return InterleaveLayout(
            num_chunks=num_chunks, chunk_size=chunk_size, with_indicator=with_indicator,
            total_length=total, is_rep_slot=is_rep, is_token_slot=is_tok,
            chunk_of_position=chunk_of, indicator_index=0 if with_indicator else None)

    def token_positions(self) -> np.ndarray:
        """Interleaved indices of the raw tokens, in token order."""
        return np.flatnonzero(self.is_token_slot)

    def rep_positions(self) -> np.ndarray:
        """Interleaved indices of the representation slots, chunk order."""
        return np.flatnonzero(self.is_rep_slot)

    def context_row_positions(self) -> np.ndarray:
        """Interleaved row holding each context length i = 1..N.

        After i tokens of context the next-token predictor row is the i-th
        token's slot when i is not a multiple of C, and the rep slot of chunk
        i/C when it is (the whole chunk has been absorbed into its
        representation at that point). These N rows are the ones whose
        attention spans the per-token cost formula counts.
        """
        toks = self.token_positions()
        reps = self.rep_positions()
        rows = toks.copy()
        # context i = k*C lands on rep slot k-1 (0-based)
        boundary = np.arange(1, self.num_chunks + 1) * self.chunk_size - 1
        rows[boundary] = reps
        return rows


def _causal_grid(length: int) -> tuple[np.ndarray, np.ndarray]:
    q = np.arange(length)[:, None]
    k = np.arange(length)[None, :]
    return q, k


def build_mask(spec: MaskSpec, length: int,
               layout: Optional[InterleaveLayout] = None) -> MaskMatrix:
    """Materializable mask for ``spec`` at the given sequence length.

    ``cat_interleaved`` requires a layout describing which positions are
    representation slots; all other kinds ignore it.
    """
    if spec.kind == "cat_interleaved":
        if layout is None:
            raise ValueError("cat_interleaved mask requires an InterleaveLayout")
        if layout.total_length != length:
            raise ValueError(f"layout length {layout.total_length} != mask length {length}")
        if layout.chunk_size != spec.chunk_size:
            raise ValueError("layout chunk size disagrees with mask spec")

    def builder() -> np.ndarray:
        q, k = _causal_grid(length)
        if spec.kind == "dense_causal":
            return k <= q
        if spec.kind == "bidirectional":
            return np.ones((length, length), dtype=bool)
        if spec.kind == "sliding_window":
            return (k <= q) & (k > q - spec.window)
        if spec.kind == "sparse_strided":
            c = spec.chunk_size
            same_chunk = (q // c) == (k // c)
            chunk_final = (k % c) == (c - 1)
            return (k <= q) & (same_chunk | chunk_final)
        if spec.kind == "cat_interleaved":
            lay = layout
            tok = lay.is_token_slot
            rep = lay.is_rep_slot
            cid = lay.chunk_of_position
            allowed = np.zeros((length, length), dtype=bool)
            tok_q = tok[:, None]
            rep_q = rep[:, None]
            same_chunk = cid[:, None] == cid[None, :]
            earlier_chunk = cid[None, :] < cid[:, None]
            # token rows: own-chunk causal tokens + all earlier-chunk rep slots
            allowed |= tok_q & tok[None, :] & same_chunk & (k <= q)
            allowed |= tok_q & rep[None, :] & earlier_chunk
            # rep rows: earlier rep slots + self
            allowed |= rep_q & rep[None, :] & (k <= q)
            if lay.with_indicator:
                allowed[:, lay.indicator_index] = True
                allowed[lay.indicator_index, :] = False
                allowed[lay.indicator_index, lay.indicator_index] = True
            return allowed
        raise ValueError(f"unknown mask kind {spec.kind!r}")

    return MaskMatrix(length, builder, causal=spec.kind != "bidirectional")
