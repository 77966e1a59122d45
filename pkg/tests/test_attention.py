import math

import pytest
import torch
from hypothesis import given, strategies as st

from branchdit.attention import (CONDITIONAL, JOINT, MUTUAL, MUTUAL_OPEN, NONE, BranchMask, attention_rows,
                                 mask_logit, masked_attention)
from branchdit.branches import SPATIAL, SUBJECT, BranchLayout
from branchdit.numerics import DegenerateRowError

F64 = torch.float64
INF = -math.inf


def dense_mask(mask):
    n = mask.layout.total
    return torch.tensor([[mask_logit(mask, i, j) for j in range(n)] for i in range(n)], dtype=F64)


def textbook(q, k, v, m, heads, w_o=None):
    """Materialised n x n mask and per-head loops."""
    n, d = q.shape
    dh = d // heads
    out = torch.zeros(n, d, dtype=F64)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh) + m
        for i in range(n):
            row = logits[i]
            live = torch.isfinite(row)
            e = torch.zeros(n, dtype=F64)
            e[live] = torch.exp(row[live] - row[live].max())
            out[i, sl] = (e / e.sum()) @ v[:, sl]
    return out if w_o is None else out @ w_o


def qkv(n, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(n, d, generator=g, dtype=F64) for _ in range(3))


def test_conditional_mask_example():
    m = dense_mask(BranchMask(BranchLayout(1, 1, ((SPATIAL, 2),)), CONDITIONAL))
    expect = torch.zeros(4, 4, dtype=F64)
    expect[2:, :2] = INF
    assert torch.equal(m, expect)


def test_mutual_open_example_is_literal_cross_blocking():
    m = dense_mask(BranchMask(BranchLayout(1, 1, ((SPATIAL, 1), (SUBJECT, 1))), MUTUAL_OPEN))
    expect = torch.zeros(4, 4, dtype=F64)
    expect[2, 3] = expect[3, 2] = INF
    assert torch.equal(m, expect)


def test_mutual_blocks_denoise_and_cross():
    m = dense_mask(BranchMask(BranchLayout(1, 1, ((SPATIAL, 1), (SUBJECT, 1))), MUTUAL))
    expect = torch.zeros(4, 4, dtype=F64)
    expect[2:, :2] = INF
    expect[2, 3] = expect[3, 2] = INF
    assert torch.equal(m, expect)


def test_joint_blocks_only_denoise():
    m = dense_mask(BranchMask(BranchLayout(1, 1, ((SPATIAL, 1), (SUBJECT, 1))), JOINT))
    expect = torch.zeros(4, 4, dtype=F64)
    expect[2:, :2] = INF
    assert torch.equal(m, expect)


def test_none_mode_all_zero():
    m = dense_mask(BranchMask(BranchLayout(2, 3, ((SPATIAL, 2), (SUBJECT, 2))), NONE))
    assert torch.equal(m, torch.zeros_like(m))


def test_conditional_needs_one_block():
    with pytest.raises(ValueError):
        BranchMask(BranchLayout(1, 1, ((SPATIAL, 1), (SUBJECT, 1))), CONDITIONAL)


def test_fault_flips_exactly_one_entry():
    mask = BranchMask(BranchLayout(1, 2, ((SPATIAL, 2),)), CONDITIONAL)
    diff = dense_mask(mask.with_fault(3, 1)) != dense_mask(mask)
    assert int(diff.sum()) == 1 and bool(diff[3, 1])


def test_single_token_returns_wo_v():
    q, k, v = qkv(1)
    w_o = torch.randn(8, 8, dtype=F64)
    out = masked_attention(q, k, v, BranchMask(BranchLayout(0, 1, ()), NONE), 2, w_o)
    assert torch.allclose(out, v @ w_o, rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode,blocks", [
    (MUTUAL, ((SPATIAL, 2), (SUBJECT, 3))),
    (CONDITIONAL, ((SPATIAL, 4),)),
    (JOINT, ((SPATIAL, 2), (SUBJECT, 2))),
    (MUTUAL_OPEN, ((SPATIAL, 2), (SUBJECT, 2))),
    (NONE, ((SPATIAL, 3),)),
])
def test_matches_dense_mask_oracle(mode, blocks):
    layout = BranchLayout(1, 2, blocks)
    q, k, v = qkv(layout.total, seed=3)
    w_o = torch.randn(8, 8, dtype=F64)
    mask = BranchMask(layout, mode)
    ref = textbook(q, k, v, dense_mask(mask), 2, w_o)
    assert torch.allclose(masked_attention(q, k, v, mask, 2, w_o), ref, rtol=0, atol=1e-12)
    faulted = mask.with_fault(layout.total - 1, 0)
    ref = textbook(q, k, v, dense_mask(faulted), 2, w_o)
    assert torch.allclose(masked_attention(q, k, v, faulted, 2, w_o), ref, rtol=0, atol=1e-12)


@given(st.integers(0, 4), st.integers(1, 8), st.lists(st.integers(1, 6), min_size=1, max_size=3),
       st.integers(0, 10_000))
def test_condition_rows_never_see_denoising_keys(n_text, n_noise, sizes, seed):
    layout = BranchLayout(n_text, n_noise, tuple((SPATIAL, s) for s in sizes))
    mode = CONDITIONAL if len(sizes) == 1 else MUTUAL
    q, k, v = qkv(layout.total, seed=seed)
    _, probs = masked_attention(q, k, v, BranchMask(layout, mode), 2, return_probs=True)
    nd = layout.n_denoise
    assert bool((probs[:, nd:, :nd] == 0).all())
    ids = layout.block_ids()
    cross = (ids[:, None] >= 0) & (ids[None, :] >= 0) & (ids[:, None] != ids[None, :])
    assert bool((probs[:, cross] == 0).all())
    assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), rtol=0, atol=1e-12)


def test_attention_rows_subsets():
    layout = BranchLayout(2, 3, ((SPATIAL, 3),))
    q, k, v = qkv(layout.total, seed=5)
    mask = BranchMask(layout, CONDITIONAL)
    full = masked_attention(q, k, v, mask, 2)
    assert torch.equal(attention_rows(q, k, v, mask, 2, range(layout.total)), full)
    sub = attention_rows(q[:5], k, v, mask, 2, range(5))
    assert torch.allclose(sub, full[:5], rtol=0, atol=1e-12)
    assert attention_rows(q[:0], k, v, mask, 2, range(0)).shape == (0, 8)


def test_all_masked_row_is_an_error():
    layout = BranchLayout(1, 1, ((SPATIAL, 1),))
    q, k, v = qkv(3)
    faulted = BranchMask(layout, CONDITIONAL).with_fault(2, 2)  # the lone condition key is now blocked too
    with pytest.raises(DegenerateRowError):
        masked_attention(q, k, v, faulted, 2)
