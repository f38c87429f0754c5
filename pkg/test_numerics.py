#!/usr/bin/env python3
"""
Test script to verify softmax, additive attention, the parameter store and the gradient checker
"""

import numpy as np
import pytest

from errors import DeterminismError, DimensionError, LengthError, NumericError
from numerics import (AdditiveAttention, ParamStore, additive_attention_logit, context_vector,
                      grad_check, make_rng, softmax)


def test_softmax_basic_cases():
    assert softmax([0.0, 0.0]) == pytest.approx([0.5, 0.5], abs=1e-15)
    assert softmax([5.0]) == pytest.approx([1.0])
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0, abs=1e-12)


def test_softmax_errors():
    with pytest.raises(LengthError):
        softmax([])
    with pytest.raises(NumericError):
        softmax([0.0, np.nan])
    with pytest.raises(DimensionError):
        softmax(np.zeros((2, 2)))


def test_softmax_sums_to_one_and_is_shift_invariant():
    rng = make_rng(3)
    for _ in range(50):
        z = rng.normal(scale=10.0, size=rng.integers(1, 20))
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0)
        assert softmax(z + 123.5) == pytest.approx(p, abs=1e-12)


def test_additive_attention_logit_hand_case():
    # tanh(2*1 - 2*1 + 0) * 3 = 0
    assert additive_attention_logit([1.0], [1.0], [[2.0]], [[-2.0]], [3.0], [0.0]) == 0.0
    # tanh(0.5) * 2
    value = additive_attention_logit([1.0], [0.0], [[0.5]], [[1.0]], [2.0], [0.0])
    assert value == pytest.approx(2.0 * np.tanh(0.5), abs=1e-15)


def test_additive_attention_shape_mismatch():
    with pytest.raises(DimensionError):
        additive_attention_logit([1.0, 2.0], [1.0], [[1.0]], [[1.0]], [1.0], [0.0])


def test_context_vector():
    memory = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert context_vector([0.25, 0.75], memory) == pytest.approx([0.25, 0.75])
    with pytest.raises(DimensionError):
        context_vector([1.0], memory)


def test_context_vector_is_linear_in_weights():
    rng = make_rng(14)
    for _ in range(200):
        n, width = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        memory = rng.normal(size=(n, width))
        w1, w2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        a, b = rng.normal(size=2)
        combined = context_vector(a * w1 + b * w2, memory)
        np.testing.assert_allclose(combined, a * context_vector(w1, memory) + b * context_vector(w2, memory),
                                   rtol=1e-12, atol=1e-12)
        one_hot = np.zeros(n)
        one_hot[n - 1] = 1.0
        np.testing.assert_array_equal(context_vector(one_hot, memory), memory[n - 1])


def test_param_store_round_trip_and_digest():
    params = ParamStore(make_rng(0))
    params.create("a", (3, 2), fan_in=2)
    params.create("b", (4,), init="zeros")
    clone = ParamStore.from_dict(params.to_dict())
    assert clone.names() == params.names()
    assert np.array_equal(clone["a"], params["a"])
    assert clone.digest() == params.digest()
    clone["a"][0, 0] += 1.0
    assert clone.digest() != params.digest()
    assert params.num_parameters() == 10


def test_make_rng_is_reproducible():
    assert np.array_equal(make_rng(7).random(5), make_rng(7).random(5))


def _attention_setup(seed=1, n=3, memory_dim=4, query_dim=3, hidden=5):
    rng = make_rng(seed)
    params = ParamStore(rng)
    layer = AdditiveAttention("att", memory_dim, query_dim, hidden)
    layer.register(params)
    memory = rng.normal(size=(n, memory_dim))
    query = rng.normal(size=query_dim)
    return params, layer, memory, query


def test_attention_zero_params_gives_uniform_weights():
    params, layer, memory, query = _attention_setup()
    for name in params.names():
        params.set(name, np.zeros_like(params[name]))
    weights, context, _, _ = layer.forward(params, memory, query)
    assert weights == pytest.approx([1 / 3] * 3, abs=1e-15)
    assert context == pytest.approx(memory.mean(axis=0), abs=1e-12)


def test_attention_mask_zeroes_masked_entries():
    params, layer, memory, query = _attention_setup()
    weights, _, _, _ = layer.forward(params, memory, query, mask=np.array([True, False, True]))
    assert weights[1] == 0.0
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_attention_gradients_pass_grad_check():
    params, layer, memory, query = _attention_setup()
    target = make_rng(9).normal(size=memory.shape[1])

    def loss_fn(p):
        weights, context, _, cache = layer.forward(p, memory, query)
        loss = float(np.dot(context, target) + 0.5 * np.sum(weights ** 2))
        layer.backward(p, cache, d_weights=weights, d_context=target)
        return loss

    report = grad_check(loss_fn, params, eps=1e-5)
    assert report.passed, report.per_parameter


def test_attention_backward_memory_and_query_gradients():
    params, layer, memory, query = _attention_setup()
    target = np.arange(memory.shape[1], dtype=float)

    def loss(mem, q):
        _, context, _, _ = layer.forward(params, mem, q)
        return float(np.dot(context, target))

    _, _, _, cache = layer.forward(params, memory, query)
    d_memory, d_query = layer.backward(params, cache, d_context=target)
    eps = 1e-6
    for i in range(query.size):
        e = np.zeros_like(query)
        e[i] = eps
        numeric = (loss(memory, query + e) - loss(memory, query - e)) / (2 * eps)
        assert d_query[i] == pytest.approx(numeric, rel=1e-5, abs=1e-9)
    e = np.zeros_like(memory)
    e[1, 2] = eps
    numeric = (loss(memory + e, query) - loss(memory - e, query)) / (2 * eps)
    assert d_memory[1, 2] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_grad_check_detects_wrong_gradient():
    params = ParamStore(make_rng(2))
    params.create("w", (3,), fan_in=3)

    def loss_fn(p):
        w = p["w"]
        p.accumulate("w", 3.0 * w)  # true gradient is 2w
        return float(np.sum(w * w))

    report = grad_check(loss_fn, params, eps=1e-5)
    assert not report.passed
    assert report.max_rel_error > 0.1


def test_grad_check_rejects_nondeterministic_loss():
    params = ParamStore(make_rng(2))
    params.create("w", (2,), fan_in=2)
    calls = []

    def loss_fn(p):
        calls.append(1)
        return float(len(calls))

    with pytest.raises(DeterminismError):
        grad_check(loss_fn, params)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
