import math

import pytest
import torch

F64 = torch.float64
from hypothesis import given, strategies as st

from branchdit.numerics import (DegenerateRowError, ParamStore, ShapeError, check_gradients, dtype_for, matmul,
                                rmsnorm, softmax_rows)


def triple_loop(a, b):
    out = torch.zeros(a.shape[0], b.shape[1], dtype=torch.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def test_matmul_identity_and_forced():
    assert torch.equal(matmul(torch.eye(2), torch.tensor([[3.0], [4.0]])), torch.tensor([[3.0], [4.0]]))
    assert torch.equal(matmul(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0], [4.0]])), torch.tensor([[11.0]]))


def test_matmul_matches_triple_loop():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(5, 7, generator=g, dtype=F64), torch.randn(7, 3, generator=g, dtype=F64)
    assert torch.allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_examples():
    assert torch.equal(softmax_rows(torch.tensor([[0.0, 0.0]])), torch.tensor([[0.5, 0.5]]))
    assert torch.equal(softmax_rows(torch.tensor([[0.0, -math.inf]])), torch.tensor([[1.0, 0.0]]))
    x = [1.0, 2.0, 3.0]
    denom = sum(math.exp(v) for v in x)
    ref = torch.tensor([[math.exp(v) / denom for v in x]])
    assert torch.allclose(softmax_rows(torch.tensor([x])), ref, rtol=0, atol=1e-12)


def test_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        softmax_rows(torch.tensor([[0.0, 1.0], [-math.inf, -math.inf]]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(values, shift):
    x = torch.tensor([values], dtype=F64)
    p = softmax_rows(x)
    assert abs(float(p.sum()) - 1.0) < 1e-12
    assert torch.allclose(softmax_rows(x + shift), p, rtol=0, atol=1e-12)


@given(st.lists(st.booleans(), min_size=2, max_size=10))
def test_softmax_masked_entries_exactly_zero(mask):
    mask[0] = False  # keep one entry live
    x = torch.where(torch.tensor([mask]), -math.inf, torch.arange(len(mask), dtype=torch.float64)[None])
    p = softmax_rows(x)
    assert bool((p[torch.tensor([mask])] == 0).all())


def test_softmax_gradient_ignores_masked_entries():
    x = torch.tensor([[0.3, -math.inf, 1.2]], requires_grad=True)
    (softmax_rows(x) * torch.tensor([[1.0, 5.0, -2.0]])).sum().backward()
    assert torch.isfinite(x.grad).all()
    assert x.grad[0, 1] == 0


def test_rmsnorm_formula():
    g = torch.Generator().manual_seed(1)
    x, w = torch.randn(4, 6, generator=g, dtype=F64), torch.randn(6, generator=g, dtype=F64)
    ref = torch.stack([row / math.sqrt(float((row ** 2).mean()) + 1e-6) for row in x]) * w
    assert torch.allclose(rmsnorm(x, w), ref, rtol=0, atol=1e-12)


def test_dtype_for():
    assert dtype_for("f64") is torch.float64
    assert dtype_for("f32") is torch.float32
    with pytest.raises(ValueError):
        dtype_for("f16")


def test_param_store_basics():
    s = ParamStore()
    s.add("a", torch.ones(2, 3))
    s.add("b", torch.zeros(4), trainable=False)
    assert s.names() == ["a", "b"] and s.names(trainable=True) == ["a"]
    assert s.num_values() == 10 and s.num_values(trainable=True) == 6
    assert "a" in s and len(s) == 2
    s.backward((s["a"] * 2).sum())
    assert torch.equal(s.grad("a"), torch.full((2, 3), 2.0))
    assert torch.equal(s.grad("b"), torch.zeros(4))  # frozen slot stays zero
    s.zero_grad()
    assert torch.equal(s.grad("a"), torch.zeros(2, 3))


def test_gradcheck_quadratic():
    s = ParamStore()
    s.add("p", torch.tensor([0.3, -1.2, 2.5], dtype=F64))
    rep = check_gradients(lambda: 0.5 * (s["p"] ** 2).sum(), s, tol=1e-8)
    assert rep.passed and rep.checked == 3 and rep.max_rel_error < 1e-8


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x ** 2).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # true gradient is 2x


def test_gradcheck_detects_wrong_backward():
    s = ParamStore()
    s.add("p", torch.tensor([0.5, 1.5], dtype=F64))
    rep = check_gradients(lambda: _WrongGrad.apply(s["p"]), s)
    assert not rep.passed and len(rep.failures) == 2


def test_gradcheck_subsample_is_seeded():
    s = ParamStore()
    s.add("p", torch.linspace(-1, 1, 50, dtype=F64))
    a = check_gradients(lambda: (s["p"] ** 3).sum(), s, max_entries=10, seed=3)
    b = check_gradients(lambda: (s["p"] ** 3).sum(), s, max_entries=10, seed=3)
    assert a.checked == 10 and a.max_rel_error == b.max_rel_error
