import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sitformer.errors import ShapeError
from sitformer.tensor import (
    activation,
    batched_matmul,
    cross_entropy,
    finite_difference_grad,
    gather,
    gradcheck,
    layer_norm,
    relative_error,
    softmax,
)


def test_constant_row_softmax_is_uniform():
    s = softmax(torch.full((3, 5), 2.5))
    assert torch.allclose(s, torch.full((3, 5), 0.2), atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        softmax(torch.zeros(2, 0))


@given(st.integers(1, 6), st.integers(1, 8), st.floats(0.01, 10), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(rows, cols, scale, seed):
    x = 50 * torch.randn(rows, cols, generator=torch.Generator().manual_seed(seed))
    s = softmax(x, -1, scale)
    assert torch.all(torch.isfinite(s))
    assert torch.allclose(s.sum(-1), torch.ones(rows), atol=1e-12)
    assert torch.allclose(s, torch.softmax(scale * x, -1), atol=1e-12)


def test_softmax_sum_has_zero_gradient():
    x = torch.randn(4, 6, requires_grad=True)
    softmax(x, -1, 0.7).sum().backward()
    assert x.grad.abs().max() < 1e-14


def test_identity_matmul():
    x = torch.randn(2, 4, 3)
    assert torch.equal(batched_matmul(torch.eye(4).expand(2, 4, 4), x), x)
    with pytest.raises(ShapeError):
        batched_matmul(x, x)


def test_gather_against_numpy():
    table = torch.randn(3, 7)
    idx = torch.tensor([[0, 6], [2, 2], [5, 1]])
    out = gather(table, idx, dim=1)
    assert out.shape == (3, 3, 2)
    assert np.array_equal(out.numpy(), table.numpy()[:, idx.numpy()])


def test_layer_norm_reference():
    x = torch.randn(5, 8)
    w, b = torch.randn(8), torch.randn(8)
    ref = (x - x.mean(-1, keepdim=True)) / torch.sqrt(x.var(-1, unbiased=False, keepdim=True) + 1e-5) * w + b
    assert torch.allclose(layer_norm(x, w, b), ref, atol=1e-12)


def test_cross_entropy_reference():
    logits = torch.randn(6, 4)
    y = torch.tensor([0, 3, 1, 1, 2, 0])
    ref = -(logits.log_softmax(-1)[torch.arange(6), y]).mean()
    assert torch.allclose(cross_entropy(logits, y), ref, atol=1e-14)


def test_finite_difference_of_quadratic():
    a = torch.randn(4, 4)
    x = torch.randn(4)
    fd = finite_difference_grad(lambda: x @ a @ x, x)
    assert torch.allclose(fd, (a + a.T) @ x, atol=1e-8)


def test_relative_error_floor():
    a, b = torch.tensor([0.0, 1.0]), torch.tensor([1e-9, 1.1])
    err = relative_error(a, b, floor=1e-6)
    assert err[0] == pytest.approx(1e-3) and err[1] == pytest.approx(0.1 / 1.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["tanh", "relu", "gelu", "sigmoid"]))
def test_composite_graph_gradients(seed, act):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 5, 3, generator=g)
    w = torch.randn(3, 4, generator=g, requires_grad=True)
    gamma = torch.randn(4, generator=g, requires_grad=True)
    beta = torch.randn(4, generator=g, requires_grad=True)
    table = torch.randn(4, 6, generator=g, requires_grad=True)
    idx = torch.randint(0, 6, (5, 5), generator=g)
    y = torch.tensor([1, 3])
    f = activation(act)

    def loss():
        h = layer_norm(f(x @ w), gamma, beta)  # [2, 5, 4]
        m = gather(table, idx, dim=1)  # [4, 5, 5]
        s = softmax(torch.einsum("bic,cij,bjc->bc", h, m, h), -1, 0.5)
        return cross_entropy(s * 3.0, y) + (0.05 * batched_matmul(h, h.transpose(1, 2))).exp().mean()

    report = gradcheck(loss, [("w", w), ("gamma", gamma), ("beta", beta), ("table", table)])
    assert max(report.values()) <= 1e-4, report
