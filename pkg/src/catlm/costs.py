"""Exact attention-pair, state-size, and cache-entry accounting.

Every asymptotic claim about the chunk-compressed architecture is reduced to
checkable integers here: closed forms on one side, brute-force enumeration of
the materialized masks and instrumented generation traces on the other. A
disagreement anywhere is a hard failure.

The per-token cost formula sum(floor(i/C) + (i mod C) + 1) for i = 1..N counts
the attention span of the row holding each context length i in the interleaved
decoder pass (mid-chunk token rows; the rep slot at chunk boundaries),
indicator included. The interleaved mask also carries rows the formula does
not count -- the chunk-final token rows, whose outputs feed nothing, and the
indicator row itself -- reported separately below.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from fractions import Fraction
from typing import Optional

import numpy as np

from .masks import InterleaveLayout, build_mask, bidirectional, cat_interleaved

__all__ = [
    "AuditError",
    "TrainPairBreakdown",
    "CostReport",
    "cat_context_pairs",
    "cat_train_pairs",
    "compress_pairs",
    "dense_pairs",
    "state_size",
    "decode_entries_at",
    "peak_live_entries",
    "memory_ratio",
    "audit",
]


class AuditError(AssertionError):
    """An instrumented count disagreed with its closed form."""


def _require_divides(n: int, c: int) -> None:
    if c < 2:
        raise ValueError("chunk size must be >= 2")
    if n % c != 0:
        raise ValueError(f"chunk size {c} does not divide sequence length {n}")


def cat_context_pairs(n: int, c: int) -> int:
    """sum_{i=1..N} floor(i/C) + (i mod C) + 1: spans of the N context rows."""
    _require_divides(n, c)
    i = np.arange(1, n + 1, dtype=np.int64)
    return int((i // c + i % c + 1).sum())


def boundary_row_pairs(n: int, c: int) -> int:
    """Spans of the chunk-final token rows (indicator + k-1 reps + C in-chunk)."""
    _require_divides(n, c)
    k = np.arange(1, n // c + 1, dtype=np.int64)
    return int((k + c).sum())


@dataclass(frozen=True)
class TrainPairBreakdown:
    """Allowed attention pairs of the interleaved training mask, by row class."""

    n: int
    c: int
    context_rows: int       # matches the per-token cost formula
    boundary_rows: int      # chunk-final token rows (outputs unused)
    indicator_row: int

    @property
    def total(self) -> int:
        return self.context_rows + self.boundary_rows + self.indicator_row


def enumerate_interleaved_pairs(n: int, c: int) -> TrainPairBreakdown:
    """Brute-force the materialized mask and classify row totals."""
    _require_divides(n, c)
    k = n // c
    layout = InterleaveLayout.build(k, c, with_indicator=True)
    allowed = build_mask(cat_interleaved(c), layout.total_length, layout).allowed
    row_counts = allowed.sum(axis=1)
    ctx = layout.context_row_positions()
    boundary = layout.token_positions()[c - 1::c]
    ind = layout.indicator_index
    covered = len(ctx) + len(boundary) + 1
    if covered != layout.total_length:
        raise AuditError("row classification does not cover the mask")
    return TrainPairBreakdown(
        n=n, c=c,
        context_rows=int(row_counts[ctx].sum()),
        boundary_rows=int(row_counts[boundary].sum()),
        indicator_row=int(row_counts[ind]),
    )


def cat_train_pairs(n: int, c: int) -> TrainPairBreakdown:
    """Closed-form pair counts, cross-checked against mask enumeration.

    Raises AuditError if the formula and the brute-force count disagree on any
    component.
    """
    formula = TrainPairBreakdown(
        n=n, c=c,
        context_rows=cat_context_pairs(n, c),
        boundary_rows=boundary_row_pairs(n, c),
        indicator_row=1,
    )
    enumerated = enumerate_interleaved_pairs(n, c)
    if formula != enumerated:
        raise AuditError(
            f"train-pair formula {formula} != enumeration {enumerated} at N={n}, C={c}")
    return formula


def compress_pairs(n: int, c: int) -> int:
    """Self-attention pairs for compressing all chunks: (N/C) * C^2."""
    _require_divides(n, c)
    return (n // c) * c * c


def enumerate_compress_pairs(n: int, c: int) -> int:
    _require_divides(n, c)
    per_chunk = build_mask(bidirectional(), c).allowed_count()
    return (n // c) * per_chunk


def dense_pairs(n: int) -> int:
    """Causal mask total: N(N+1)/2."""
    return n * (n + 1) // 2


def state_size(arch: str, n: int, d: int, c: Optional[int] = None,
               w: Optional[int] = None) -> int:
    """Scalars needed to decode the next token at context length ``n``.

    dense keeps every token (N*D); the chunk-compressed model keeps one vector
    per chunk ((N/C)*D); sliding keeps the window (W*D); strided-sparse keeps
    its live stride columns, one per chunk ((N/C)*D).
    """
    if arch == "dense":
        return n * d
    if arch == "cat":
        if c is None:
            raise ValueError("cat state size requires a chunk size")
        _require_divides(n, c)
        return (n // c) * d
    if arch == "sliding":
        if w is None or w < 1:
            raise ValueError("sliding state size requires a window")
        return w * d
    if arch == "sparse":
        if c is None:
            raise ValueError("sparse state size requires a chunk size")
        _require_divides(n, c)
        return (n // c) * d
    raise ValueError(f"unknown architecture {arch!r}")


def decode_entries_at(t: int, c: int) -> int:
    """Live cache entries after t context tokens: 1 + floor(t/C) + (t mod C)."""
    return 1 + t // c + t % c


def peak_live_entries(n: int, c: int) -> int:
    """Max of the live-entry law over t = 0..n."""
    return max(decode_entries_at(t, c) for t in range(n + 1))


def cache_capacity(n: int, c: int) -> int:
    """Slots a generation run to n tokens must provision: 1 + N/C + C."""
    _require_divides(n, c)
    return 1 + n // c + c


def memory_ratio(n: int, c: int) -> Fraction:
    """Dense cache entries N over compressed-cache capacity 1 + N/C + C.

    For C = 1 (not a supported model size) the ratio drops below 1: the layout
    would store a rep per token plus the token itself.
    """
    if c < 1:
        raise ValueError("chunk size must be >= 1")
    if n % c != 0:
        raise ValueError(f"chunk size {c} does not divide {n}")
    return Fraction(n, 1 + n // c + c)


@dataclass
class CostReport:
    """Machine-checkable cost table for one (N, C, D, depth) configuration."""

    n: int
    c: int
    d: int
    layers: int
    train_attention_pairs: int
    train_context_pairs: int
    compress_attention_pairs: int
    dense_attention_pairs: int
    state_size_values: int
    dense_state_size_values: int
    cache_capacity_entries: int
    peak_live_entries: int
    dense_cache_entries: int
    entry_ratio: float
    # bytes assume 4-byte floats and both K and V per layer
    cache_bytes_estimate: int
    dense_cache_bytes_estimate: int
    generation_steps_audited: int = 0

    def decode_entries(self, t: int) -> int:
        return decode_entries_at(t, self.c)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(n: int, c: int, d: int, layers: int) -> CostReport:
    pairs = cat_train_pairs(n, c)
    cap = cache_capacity(n, c)
    return CostReport(
        n=n, c=c, d=d, layers=layers,
        train_attention_pairs=pairs.total,
        train_context_pairs=pairs.context_rows,
        compress_attention_pairs=compress_pairs(n, c),
        dense_attention_pairs=dense_pairs(n),
        state_size_values=state_size("cat", n, d, c=c),
        dense_state_size_values=state_size("dense", n, d),
        cache_capacity_entries=cap,
        peak_live_entries=peak_live_entries(n, c),
        dense_cache_entries=n,
        entry_ratio=float(memory_ratio(n, c)),
        cache_bytes_estimate=cap * d * 4 * layers * 2,
        dense_cache_bytes_estimate=n * d * 4 * layers * 2,
    )


def audit(model, n: int, c: int, generation_steps: Optional[int] = None) -> CostReport:
    """Cross-check instrumented counters against every closed form.

    Enumerates the actual training mask, the per-chunk compression mask, and an
    instrumented generation trace from the given model. The first divergent
    generation step is reported on failure.
    """
    from .generate import SamplerConfig, generate  # local import to avoid a cycle

    cfg = model.cfg
    report = build_report(n, c, cfg.d_g, cfg.decoder_depth)
    enum_compress = enumerate_compress_pairs(n, c)
    if enum_compress != report.compress_attention_pairs:
        raise AuditError(
            f"compression pairs: enumeration {enum_compress} != "
            f"formula {report.compress_attention_pairs}")
    steps = n - c if generation_steps is None else generation_steps
    prompt = np.full(c, (cfg.pad_id + 1) % cfg.vocab_size, dtype=np.int64)
    _, trace = generate(model, prompt, steps, c, SamplerConfig())
    for entry in trace:
        want = decode_entries_at(entry.t, c)
        if entry.live_entries != want:
            raise AuditError(
                f"generation audit: live entries {entry.live_entries} != "
                f"{want} at step t={entry.t}")
        if entry.attended_keys != want:
            raise AuditError(
                f"generation audit: attention span {entry.attended_keys} != "
                f"{want} at step t={entry.t}")
    report.generation_steps_audited = len(trace)
    return report
