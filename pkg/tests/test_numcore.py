import numpy as np
import pytest

from aorfair.numcore import (ContractError, Dense, DimensionError, NumericalError, Parameter, ReLU,
                             SoftmaxOutput, backward, forward, grad_check, one_hot, rel_err, softmax,
                             softmax_cross_entropy)


def _mlp(rng, dims):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense.init(a, b, rng, name=f"l{i}"))
        if i < len(dims) - 2:
            layers.append(ReLU(b))
    return layers


def _params(layers):
    return [p for layer in layers for p in layer.parameters()]


def _loss(layers, X, Y):
    return softmax_cross_entropy(forward(layers, X).output, Y)[0]


def _backprop(layers, X, Y):
    for p in _params(layers):
        p.zero_grad()
    tr = forward(layers, X)
    _, g = softmax_cross_entropy(tr.output, Y)
    backward(layers, tr, g)


def test_dense_forward_matches_scalar_loops(rng):
    layer = Dense.init(3, 2, rng)
    layer.bias.value[...] = rng.standard_normal((1, 2))
    X = rng.standard_normal((4, 3))
    out = forward([layer], X).output
    for i in range(4):
        for j in range(2):
            ref = sum(X[i, k] * layer.weight.value[k, j] for k in range(3)) + layer.bias.value[0, j]
            assert out[i, j] == pytest.approx(ref, abs=1e-14)


def test_softmax_rows_sum_to_one_and_are_shift_invariant(rng):
    z = rng.standard_normal((5, 4)) * 50
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(softmax(z + 1000.0), p, atol=1e-15)


def test_cross_entropy_scalar_oracle(rng):
    z = rng.standard_normal((3, 4))
    y = one_hot([0, 3, 1], 4)
    loss, g = softmax_cross_entropy(z, y)
    ref = 0.0
    for i, c in enumerate([0, 3, 1]):
        ref -= z[i, c] - np.log(np.sum(np.exp(z[i])))
    assert loss == pytest.approx(ref / 3, abs=1e-14)
    np.testing.assert_allclose(g, (softmax(z) - y) / 3, atol=1e-15)


def test_cross_entropy_clamps_vanishing_probabilities():
    z = np.array([[1000.0, -1000.0]])
    loss, _ = softmax_cross_entropy(z, one_hot([1], 2))
    assert np.isfinite(loss) and loss == pytest.approx(-np.log(1e-12))


@pytest.mark.parametrize("bad", [[[0.5, 0.5]], [[1.0, 1.0]], [[0.0, 0.0]]])
def test_cross_entropy_rejects_non_one_hot(bad):
    with pytest.raises(ValueError, match="one-hot"):
        softmax_cross_entropy(np.zeros((1, 2)), np.array(bad))


def test_mlp_gradients_match_finite_differences(rng):
    layers = _mlp(rng, (5, 7, 6, 3))
    X = rng.standard_normal((9, 5))
    Y = one_hot(rng.integers(0, 3, 9), 3)
    _backprop(layers, X, Y)
    report = grad_check(lambda: _loss(layers, X, Y), _params(layers))
    assert report.ok, report.max_rel_err


def test_softmax_output_layer_backward(rng):
    layers = [Dense.init(4, 3, rng, "d"), SoftmaxOutput(3)]
    X = rng.standard_normal((5, 4))
    w = rng.standard_normal((5, 3))
    tr = forward(layers, X)
    backward(layers, tr, w)
    report = grad_check(lambda: float(np.sum(w * forward(layers, X).output)), _params(layers))
    assert report.ok, report.max_rel_err


def test_input_gradient_matches_finite_differences(rng):
    layers = _mlp(rng, (4, 6, 2))
    X = rng.standard_normal((1, 4))
    up = np.array([[1.0, -2.0]])
    gx = backward(layers, forward(layers, X), up, need_input_grad=True, accumulate=False)
    h = 1e-6
    for j in range(4):
        e = np.zeros_like(X)
        e[0, j] = h
        num = (np.sum(up * forward(layers, X + e).output) - np.sum(up * forward(layers, X - e).output)) / (2 * h)
        assert rel_err(gx[0, j], num) < 1e-6
    assert all(np.all(p.grad == 0) for p in _params(layers))


def test_frozen_parameters_receive_no_gradient(rng):
    layers = _mlp(rng, (3, 4, 2))
    for p in layers[0].parameters():
        p.trainable = False
    _backprop(layers, rng.standard_normal((6, 3)), one_hot([0, 1, 0, 1, 1, 0], 2))
    assert np.all(layers[0].weight.grad == 0)
    assert np.any(layers[2].weight.grad != 0)


def test_backward_returns_none_without_input_grad(rng):
    layers = _mlp(rng, (3, 2))
    tr = forward(layers, rng.standard_normal((2, 3)))
    assert backward(layers, tr, np.ones((2, 2))) is None


def test_dimension_mismatch_names_layer(rng):
    layers = _mlp(rng, (3, 4, 2))
    with pytest.raises(DimensionError, match=r"layer 0 \(dense\) expects 3"):
        forward(layers, np.zeros((2, 5)))


def test_stale_trace_rejected(rng):
    layers = _mlp(rng, (3, 2))
    tr = forward(layers, rng.standard_normal((2, 3)))
    layers[0].weight.version += 1
    with pytest.raises(ContractError, match="stale"):
        backward(layers, tr, np.ones((2, 2)))


def test_trace_from_other_stack_rejected(rng):
    a, b = _mlp(rng, (3, 2)), _mlp(rng, (3, 2))
    tr = forward(a, np.ones((1, 3)))
    with pytest.raises(ContractError):
        backward(b, tr, np.ones((1, 2)))


def test_bias_shape_checked():
    with pytest.raises(DimensionError):
        Dense(Parameter(np.zeros((3, 2))), Parameter(np.zeros((1, 3))))


def test_grad_check_flags_wrong_gradient(rng):
    p = Parameter(rng.standard_normal((2, 2)), "p")
    p.grad[...] = 2 * p.value + 0.1
    report = grad_check(lambda: float(np.sum(p.value ** 2)), [p])
    assert report.failed == ["p"]


def test_grad_check_skips_frozen_and_validates_step(rng):
    p = Parameter(np.ones((1, 1)), "p", trainable=False)
    assert grad_check(lambda: 0.0, [p]).max_rel_err == {}
    with pytest.raises(ValueError):
        grad_check(lambda: 0.0, [p], h=1e-2)


def test_grad_check_raises_on_non_finite_objective():
    p = Parameter(np.ones((1, 1)), "p")
    with pytest.raises(NumericalError):
        grad_check(lambda: float("nan"), [p])


def test_grad_check_restores_values(rng):
    p = Parameter(rng.standard_normal((3, 2)), "p")
    before = p.value.copy()
    grad_check(lambda: float(np.sum(np.sin(p.value))), [p])
    assert np.array_equal(before, p.value)
