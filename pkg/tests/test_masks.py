"""Mask constructors: exact counts, structural invariants, error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catlm.masks import (InterleaveLayout, MaskSpec, bidirectional, build_mask,
                         cat_interleaved, dense_causal, sliding_window,
                         sparse_strided)


def test_dense_causal_triangle_count():
    mask = build_mask(dense_causal(), 3)
    assert mask.allowed_count() == 6
    for n in (1, 5, 17, 64):
        assert build_mask(dense_causal(), n).allowed_count() == n * (n + 1) // 2


def test_sliding_window_one_is_self_only():
    mask = build_mask(sliding_window(1), 4)
    assert mask.allowed_count() == 4
    assert np.array_equal(mask.allowed, np.eye(4, dtype=bool))


def test_sliding_window_width():
    mask = build_mask(sliding_window(3), 6).allowed
    assert mask[5].sum() == 3
    assert mask[5, 3:].all() and not mask[5, :3].any()
    assert mask[1].sum() == 2  # truncated at the left edge


def test_sparse_strided_pattern():
    mask = build_mask(sparse_strided(4), 12).allowed
    # within-chunk causal
    assert mask[6, 4:7].all()
    assert not mask[6, 7]
    # previous chunk-final columns visible, other foreign columns not
    assert mask[9, 3] and mask[9, 7]
    assert not mask[9, 2] and not mask[9, 6]
    # causal overall
    assert not np.triu(mask, 1).any()


def test_bidirectional_all_allowed():
    assert build_mask(bidirectional(), 5).allowed_count() == 25


def test_cat_interleaved_requires_layout():
    with pytest.raises(ValueError):
        build_mask(cat_interleaved(4), 10)


def test_cat_interleaved_figure_configuration():
    layout = InterleaveLayout.build(8, 16, with_indicator=True)
    mask = build_mask(cat_interleaved(16), layout.total_length, layout)
    rows = layout.context_row_positions()
    counts = mask.allowed[rows].sum(axis=1)
    formula = np.array([i // 16 + i % 16 + 1 for i in range(1, 129)])
    assert np.array_equal(counts, formula)
    assert counts.sum() == 1544


def test_interleave_layout_arithmetic():
    layout = InterleaveLayout.build(2, 3, with_indicator=True)
    assert layout.total_length == 9
    assert list(layout.rep_positions()) == [4, 8]
    assert list(layout.token_positions()) == [1, 2, 3, 5, 6, 7]
    assert layout.indicator_index == 0
    assert layout.chunk_of_position[0] == -1


def test_cat_rows_structure_small():
    layout = InterleaveLayout.build(2, 2, with_indicator=True)
    mask = build_mask(cat_interleaved(2), layout.total_length, layout).allowed
    # layout: [ind, t1, t2, r1, t3, t4, r2]
    assert list(np.flatnonzero(mask[0])) == [0]          # indicator: self only
    assert list(np.flatnonzero(mask[1])) == [0, 1]       # t1: ind + self
    assert list(np.flatnonzero(mask[2])) == [0, 1, 2]    # t2: ind + t1 + self
    assert list(np.flatnonzero(mask[3])) == [0, 3]       # r1: ind + self
    assert list(np.flatnonzero(mask[4])) == [0, 3, 4]    # t3: ind + r1 + self
    assert list(np.flatnonzero(mask[5])) == [0, 3, 4, 5]
    assert list(np.flatnonzero(mask[6])) == [0, 3, 6]    # r2: ind + r1 + self


@pytest.mark.parametrize("c", [2, 4, 8, 16, 32])
def test_cat_never_attends_foreign_raw_tokens(c):
    n = 256
    layout = InterleaveLayout.build(n // c, c, with_indicator=True)
    mask = build_mask(cat_interleaved(c), layout.total_length, layout).allowed
    tok = layout.is_token_slot
    cid = layout.chunk_of_position
    for q in np.flatnonzero(tok):
        hit_cols = np.flatnonzero(mask[q] & tok)
        assert (cid[hit_cols] == cid[q]).all(), f"token row {q} crosses a chunk"
    # rep rows never see any raw token
    for q in np.flatnonzero(layout.is_rep_slot):
        assert not (mask[q] & tok).any()


def test_cat_layout_without_indicator():
    layout = InterleaveLayout.build(2, 2, with_indicator=False)
    assert layout.total_length == 6
    mask = build_mask(cat_interleaved(2), 6, layout).allowed
    assert list(np.flatnonzero(mask[0])) == [0]
    assert list(np.flatnonzero(mask[2])) == [2]          # r1: self only
    assert list(np.flatnonzero(mask[3])) == [2, 3]       # t3: r1 + self


def test_every_row_must_keep_one_entry():
    layout = InterleaveLayout.build(2, 2, with_indicator=True)
    mask = build_mask(cat_interleaved(2), layout.total_length, layout)
    assert (mask.row_counts() >= 1).all()


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec("unknown_kind")
    with pytest.raises(ValueError):
        sliding_window(0)
    with pytest.raises(ValueError):
        sparse_strided(1)
    with pytest.raises(ValueError):
        cat_interleaved(1)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 8))
def test_causal_kinds_never_look_forward(c, k):
    layout = InterleaveLayout.build(k, c, with_indicator=True)
    mask = build_mask(cat_interleaved(c), layout.total_length, layout).allowed
    assert not np.triu(mask, 1).any()
