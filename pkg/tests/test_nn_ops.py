"""Autodiff core: op semantics and gradients vs finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlvqa import nn


def fd_grad(f, params, h=1e-6):
    """Independent central-difference gradient for every parameter tensor."""
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(f().data)
            flat[i] = orig - h
            lm = float(f().data)
            flat[i] = orig
            g[i] = (lp - lm) / (2 * h)
        out[name] = g.reshape(p.data.shape)
    return out


def assert_grads_close(f, params, tol=1e-6):
    loss = f()
    loss.backward()
    numeric = fd_grad(f, params)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        np.testing.assert_allclose(analytic, numeric[name], rtol=tol, atol=tol, err_msg=name)


def test_gelu_values():
    x = nn.Tensor(np.array([0.0, 100.0, 1.0, -1.0]))
    y = nn.gelu(x).data
    assert y[0] == 0.0
    assert abs(y[1] - 100.0) < 1e-9
    # 1.0 * Phi(1.0) from the erf definition
    assert abs(y[2] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-12
    assert abs(y[2] - 0.841345) < 1e-5


def test_gelu_grad():
    rng = nn.derive_rng(0, "gelu")
    x = nn.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    assert_grads_close(lambda: nn.tsum(nn.gelu(x) * nn.gelu(x)), {"x": x})


def test_layer_norm_values():
    g1 = nn.ones_init((2,))
    b0 = nn.zeros_init((2,))
    const = nn.layer_norm(nn.Tensor(np.full((3, 2), 7.0)), g1, b0)
    np.testing.assert_allclose(const.data, 0.0, atol=1e-12)
    row = nn.layer_norm(nn.Tensor(np.array([[1.0, 3.0]])), g1, b0)
    np.testing.assert_allclose(row.data, [[-1.0, 1.0]], atol=1e-4)
    g0 = nn.zeros_init((2,))
    bias = nn.Tensor(np.array([2.0, -1.0]), requires_grad=True)
    out = nn.layer_norm(nn.Tensor(np.array([[5.0, 9.0]])), g0, bias)
    np.testing.assert_allclose(out.data, [[2.0, -1.0]], atol=1e-12)


def test_layer_norm_empty_axis_rejected():
    with pytest.raises(ValueError):
        nn.layer_norm(nn.Tensor(np.zeros((2, 0))), nn.ones_init((0,)), nn.zeros_init((0,)))


def test_layer_norm_grad():
    rng = nn.derive_rng(1, "ln")
    x = nn.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    g = nn.Tensor(rng.standard_normal(5), requires_grad=True)
    b = nn.Tensor(rng.standard_normal(5), requires_grad=True)
    t = nn.Tensor(rng.standard_normal((4, 5)))
    assert_grads_close(
        lambda: nn.tsum(nn.layer_norm(x, g, b) * t), {"x": x, "g": g, "b": b}, tol=1e-5
    )


def test_softmax_uniform_cross_entropy_is_log_c():
    for c in (2, 7, 20):
        logits = nn.Tensor(np.zeros((3, c)))
        loss = nn.cross_entropy(logits, np.zeros(3, dtype=np.int64))
        assert abs(float(loss.data) - math.log(c)) < 1e-9


def test_cross_entropy_grad():
    rng = nn.derive_rng(2, "ce")
    logits = nn.Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=6)
    assert_grads_close(lambda: nn.cross_entropy(logits, labels), {"logits": logits}, tol=1e-5)


def test_softmax_grad():
    rng = nn.derive_rng(3, "sm")
    x = nn.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    t = nn.Tensor(rng.standard_normal((2, 3, 4)))
    assert_grads_close(lambda: nn.tsum(nn.softmax(x) * t), {"x": x}, tol=1e-5)


def test_matmul_broadcast_grad():
    rng = nn.derive_rng(4, "mm")
    a = nn.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    w = nn.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    assert_grads_close(lambda: nn.tsum((a @ w) * (a @ w)), {"a": a, "w": w}, tol=1e-5)


def test_embedding_grad_scatter():
    table = nn.Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
    ids = np.array([[0, 1], [1, 3]])
    out = nn.embedding(table, ids)
    assert out.shape == (2, 2, 3)
    nn.tsum(out).backward()
    # row 1 appears twice and must accumulate
    np.testing.assert_allclose(table.grad[1], 2.0)
    np.testing.assert_allclose(table.grad[2], 0.0)


def test_getitem_and_concat_grads():
    rng = nn.derive_rng(5, "idx")
    x = nn.Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    y = nn.Tensor(rng.standard_normal((3, 2, 5)), requires_grad=True)

    def f():
        z = nn.concat([x, y], axis=1)
        cls = z[:, 0, :]
        picked = z[np.array([0, 1]), np.array([4, 5])]
        return nn.tsum(cls * cls) + nn.tsum(picked)

    assert_grads_close(f, {"x": x, "y": y}, tol=1e-5)


def test_dropout_inverted_scaling_and_eval_identity():
    x = nn.Tensor(np.ones((1000,)), requires_grad=True)
    rng = nn.derive_rng(6, "drop")
    out = nn.dropout(x, 0.5, rng, train=True)
    kept = out.data[out.data != 0]
    np.testing.assert_allclose(kept, 2.0)
    assert abs(out.data.mean() - 1.0) < 0.15
    same = nn.dropout(x, 0.5, rng, train=False)
    assert same is x


def test_dropout_deterministic_in_stream():
    x = nn.Tensor(np.ones((64,)))
    a = nn.dropout(x, 0.3, nn.derive_rng(7, "d"), train=True).data
    b = nn.dropout(x, 0.3, nn.derive_rng(7, "d"), train=True).data
    np.testing.assert_array_equal(a, b)


def test_non_finite_detection():
    x = nn.Tensor(np.array([1.0, 2.0]))
    with pytest.raises(nn.NonFiniteError):
        x * np.inf


def test_backward_requires_scalar():
    x = nn.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_each_leaf_gradient_set_once_per_backward():
    x = nn.Tensor(np.ones(3), requires_grad=True)
    loss = nn.tsum(x * x)
    loss.backward()
    first = x.grad.copy()
    loss2 = nn.tsum(x * x)
    loss2.backward()
    np.testing.assert_array_equal(x.grad, first)  # fresh, not accumulated across calls


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_orthogonal_init_property(rows, cols, seed):
    w = nn.orthogonal_init(rows, cols, seed).data
    if rows <= cols:
        np.testing.assert_allclose(w @ w.T, np.eye(rows), atol=1e-10)
    else:
        np.testing.assert_allclose(w.T @ w, np.eye(cols), atol=1e-10)


def test_orthogonal_init_examples():
    w = nn.orthogonal_init(1, 1, 42).data
    assert abs(abs(w[0, 0]) - 1.0) < 1e-12
    w48 = nn.orthogonal_init(4, 8, 11).data
    assert np.abs(w48 @ w48.T - np.eye(4)).max() < 1e-6
    again = nn.orthogonal_init(4, 8, 11).data
    np.testing.assert_array_equal(w48, again)
