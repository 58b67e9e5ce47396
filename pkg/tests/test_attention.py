import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attpose.attention import (AttentionParams, SelfAttention, attention_backward_check, attention_forward,
                               attention_vjp, softmax_rows)
from attpose.errors import ConfigurationError


def worked_example():
    sel = np.zeros((2, 4))
    sel[0, 0] = sel[1, 1] = 1.0
    return AttentionParams(sel, sel, sel, sel.T), np.array([1.0, 1.0, 0.0, 0.0])


def test_worked_example():
    params, x = worked_example()
    out, trace = attention_forward(x, params)
    np.testing.assert_allclose(trace.similarity, [[1, 1], [1, 1]], atol=1e-12)
    np.testing.assert_allclose(trace.weights, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)
    np.testing.assert_allclose(trace.attended, [1, 1], atol=1e-12)
    np.testing.assert_allclose(out, [2, 2, 0, 0], atol=1e-12)


def test_residual_identity_exact():
    rng = np.random.default_rng(0)
    for seed in range(20):
        p = AttentionParams.random(32, 8, seed=seed)
        p.W_alpha[:] = 0
        x = rng.standard_normal(32) * 10
        out, _ = attention_forward(x, p)
        assert np.array_equal(out, x)


def test_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for seed in range(50):
        p = AttentionParams.random(64, 8, seed=seed)
        _, trace = attention_forward(rng.standard_normal(64) * 5, p)
        assert np.abs(trace.weights.sum(axis=1) - 1).max() < 1e-6
        assert (trace.weights >= 0).all()


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.floats(-100, 100))
def test_softmax_shift_invariant(row, shift):
    S = np.array([row, row[::-1]])
    np.testing.assert_allclose(softmax_rows(S), softmax_rows(S + shift), atol=1e-12)


def test_softmax_large_values_finite():
    assert np.isfinite(softmax_rows(np.array([[1e4, -1e4, 0.0]]))).all()


def test_gradient_check_random_instances():
    rng = np.random.default_rng(2)
    for seed in range(10):
        p = AttentionParams.random(32, 8, seed=seed)
        x = rng.standard_normal(32)
        assert attention_backward_check(x, p, 1e-5, seed=seed) < 1e-4


def test_gradient_check_sum_probe():
    p = AttentionParams.random(16, 4, seed=3)
    x = np.random.default_rng(3).standard_normal(16)
    assert attention_backward_check(x, p, 1e-5, probe=np.ones(16)) < 1e-4


def test_zero_alpha_input_gradient_is_ones():
    p = AttentionParams.random(16, 4, seed=4)
    p.W_alpha[:] = 0
    gx, _ = attention_vjp(np.random.default_rng(4).standard_normal(16), p, np.ones(16))
    assert np.array_equal(gx, np.ones(16))


def test_perturbation_bounds():
    p = AttentionParams.random(8, 2, seed=0)
    with pytest.raises(ValueError):
        attention_backward_check(np.zeros(8), p, 1e-2)


def test_shape_errors():
    p = AttentionParams.random(16, 4, seed=0)
    with pytest.raises(ConfigurationError):
        attention_forward(np.zeros(15), p)
    with pytest.raises(ConfigurationError):
        AttentionParams(p.W_theta, p.W_phi[:, :8], p.W_g, p.W_alpha)
    with pytest.raises(ConfigurationError):
        AttentionParams.random(30, 8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_torch_layer_matches_reference(seed):
    layer = SelfAttention(32, 8).double()
    p = AttentionParams.random(32, 8, seed=seed)
    layer.set_params(p)
    x = np.random.default_rng(seed).standard_normal((3, 32))
    with torch.no_grad():
        out, trace = layer(torch.from_numpy(x), return_trace=True)
    for i in range(3):
        ref, rtrace = attention_forward(x[i], p)
        np.testing.assert_allclose(out[i].numpy(), ref, atol=1e-12)
        np.testing.assert_allclose(trace[1][i].numpy(), rtrace.weights, atol=1e-12)


def test_torch_autograd_matches_vjp():
    layer = SelfAttention(16, 4).double()
    p = AttentionParams.random(16, 4, seed=5)
    layer.set_params(p)
    x = np.random.default_rng(5).standard_normal(16)
    probe = np.random.default_rng(6).standard_normal(16)
    xt = torch.tensor(x[None], requires_grad=True)
    (layer(xt)[0] @ torch.from_numpy(probe)).backward()
    gx, grads = attention_vjp(x, p, probe)
    np.testing.assert_allclose(xt.grad[0].numpy(), gx, atol=1e-12)
    np.testing.assert_allclose(layer.theta.weight.grad.numpy(), grads.W_theta, atol=1e-12)
    np.testing.assert_allclose(layer.alpha.weight.grad.numpy(), grads.W_alpha, atol=1e-12)


def test_get_set_params_round_trip():
    layer = SelfAttention(16, 4)
    p = layer.get_params()
    assert (p.d, p.C) == (4, 16)
    layer2 = SelfAttention(16, 4)
    layer2.set_params(p)
    for a, b in zip(p.as_tuple(), layer2.get_params().as_tuple()):
        np.testing.assert_array_equal(a, b)
