"""Optimizer semantics, gradient clipping, grad_check harness, container IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlvqa import nn


def test_adamw_zero_grad_zero_decay_is_identity():
    p = nn.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nn.AdamW(lr=0.1, weight_decay=0.0)
    opt.step({"p": p}, {"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_closed_form():
    # g=1 everywhere: mhat = vhat = 1, so the step is exactly -lr/(1+eps)
    p = nn.Tensor(np.zeros(3), requires_grad=True)
    opt = nn.AdamW(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    opt.step({"p": p}, {"p": np.ones(3)})
    np.testing.assert_allclose(p.data, -0.1, atol=1e-8)


def test_adamw_decoupled_decay_only():
    p = nn.Tensor(np.array([4.0]), requires_grad=True)
    opt = nn.AdamW(lr=0.1, weight_decay=0.05)
    opt.step({"p": p}, {"p": np.zeros(1)})
    np.testing.assert_allclose(p.data, 4.0 * (1 - 0.005), rtol=1e-12)


def test_adamw_geometric_decay_under_zero_grads():
    p = nn.Tensor(np.array([2.0]), requires_grad=True)
    opt = nn.AdamW(lr=0.2, weight_decay=0.1)
    for _ in range(5):
        opt.step({"p": p}, {"p": np.zeros(1)})
    np.testing.assert_allclose(p.data, 2.0 * (1 - 0.02) ** 5, rtol=1e-12)


def test_adamw_step_counter_and_shape_check():
    p = nn.Tensor(np.zeros((2, 2)), requires_grad=True)
    opt = nn.AdamW(lr=0.01)
    opt.step({"p": p}, {"p": np.ones((2, 2))})
    assert opt.step_count == 1
    with pytest.raises(ValueError):
        opt.step({"p": p}, {"p": np.ones(4)})


def test_clip_global_norm():
    grads = {"a": np.array([2.0, 0.0]), "b": np.array([0.0])}  # N=2
    clipped = nn.clip_global_norm(grads, 1.0)
    np.testing.assert_allclose(clipped["a"], [1.0, 0.0])
    small = {"a": np.array([0.3, 0.4])}  # N=0.5
    np.testing.assert_array_equal(nn.clip_global_norm(small, 1.0)["a"], small["a"])
    with pytest.raises(ValueError):
        nn.clip_global_norm(grads, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.01, 10))
def test_clip_global_norm_bound_property(values, ceiling):
    grads = {"g": np.array(values)}
    clipped = nn.clip_global_norm(grads, ceiling)
    assert nn.global_norm(clipped) <= ceiling + 1e-9


def test_grad_check_linear_loss_exact():
    rng = nn.derive_rng(0, "lin")
    a = rng.standard_normal(5) + 0.5
    p = nn.Tensor(rng.standard_normal(5), requires_grad=True)
    err = nn.grad_check(lambda: nn.tsum(p * a), {"p": p})
    assert err < 1e-8


def test_grad_check_two_layer_net():
    rng = nn.derive_rng(1, "net")
    w1 = nn.Tensor(rng.standard_normal((4, 8)) * 0.5, requires_grad=True)
    b1 = nn.Tensor(rng.standard_normal(8) * 0.1, requires_grad=True)
    g = nn.Tensor(np.ones(8), requires_grad=True)
    b = nn.Tensor(np.zeros(8), requires_grad=True)
    w2 = nn.Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)
    x = rng.standard_normal((6, 4))
    labels = rng.integers(0, 3, size=6)

    def f():
        h = nn.layer_norm(nn.gelu(nn.Tensor(x) @ w1 + b1), g, b)
        return nn.cross_entropy(h @ w2, labels)

    err = nn.grad_check(f, {"w1": w1, "b1": b1, "g": g, "b": b, "w2": w2})
    assert err < 1e-3


def test_grad_check_rejects_nondeterministic_loss():
    p = nn.Tensor(nn.derive_rng(2, "vals").standard_normal(32), requires_grad=True)
    stream = nn.derive_rng(2, "drop")

    def f():
        return nn.tsum(nn.dropout(p, 0.5, stream, train=True))

    with pytest.raises(nn.NonDeterministicLossError):
        nn.grad_check(f, {"p": p})


def test_grad_check_h_bounds_and_dtype():
    p = nn.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        nn.grad_check(lambda: nn.tsum(p), {"p": p}, h=1e-2)
    p32 = nn.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        nn.grad_check(lambda: nn.tsum(p32), {"p": p32})


def test_container_round_trip_bit_exact(tmp_path):
    rng = nn.derive_rng(3, "io")
    arrays = {
        "g1/w": rng.standard_normal((3, 4)),
        "g1/b": rng.standard_normal(4).astype(np.float32),
        "g2/ids": rng.integers(0, 100, size=7),
        "scalarish": rng.standard_normal(1),
    }
    meta = {"seed": 9, "note": "round trip"}
    path = tmp_path / "params.xtc"
    nn.save_tensors(path, arrays, meta)
    loaded, loaded_meta = nn.load_tensors(path)
    assert loaded_meta == meta
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(loaded[k], arrays[k])
        assert loaded[k].tobytes() == arrays[k].tobytes()


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.xtc"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        nn.load_tensors(path)


def test_derive_rng_independent_streams():
    a = nn.derive_rng(1, "x").standard_normal(4)
    b = nn.derive_rng(1, "y").standard_normal(4)
    a2 = nn.derive_rng(1, "x").standard_normal(4)
    np.testing.assert_array_equal(a, a2)
    assert not np.array_equal(a, b)
