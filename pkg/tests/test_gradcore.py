import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from types import SimpleNamespace

from saplab import gradcore
from saplab.errors import ConfigurationError, InputShapeError
from conftest import central_difference, random_net


def identity_net():
    return SimpleNamespace(weights=[np.eye(2)], biases=[np.zeros(2)])


def test_forward_one_layer_identity_relu():
    # one hidden ReLU layer with identity weights, then an identity readout
    net = SimpleNamespace(weights=[np.eye(2), np.eye(2)], biases=[np.zeros(2), np.zeros(2)])
    logits, tape = gradcore.forward(net, [1.0, -2.0])
    np.testing.assert_array_equal(logits, [1.0, 0.0])
    assert len(tape.layers) == 2
    np.testing.assert_array_equal(tape.layers[0].output, [[1.0, 0.0]])


def test_forward_zero_input_zero_bias():
    net = random_net((5, 7, 6, 3))
    net = SimpleNamespace(weights=net.weights, biases=[np.zeros_like(b) for b in net.biases])
    logits, _ = gradcore.forward(net, np.zeros(5))
    np.testing.assert_array_equal(logits, np.zeros(3))


def test_forward_is_pure():
    net = random_net((4, 8, 8, 3), seed=3)
    x = np.linspace(-1, 1, 4)
    a, _ = gradcore.forward(net, x)
    b, _ = gradcore.forward(net, x)
    assert np.array_equal(a, b)


def test_forward_shape_error():
    net = random_net((4, 8, 3))
    with pytest.raises(InputShapeError):
        gradcore.forward(net, np.zeros(5))


def test_scalar_relu_gradient():
    net = SimpleNamespace(weights=[np.array([[2.0]]), np.array([[1.0]])], biases=[np.zeros(1), np.zeros(1)])
    _, tape = gradcore.forward(net, [3.0])
    assert gradcore.backward(net, tape, [1.0]) == pytest.approx([2.0])
    _, tape = gradcore.forward(net, [-3.0])
    assert gradcore.backward(net, tape, [1.0]) == pytest.approx([0.0])


def _loss_of_input(net, label):
    def f(x):
        logits, _ = gradcore.forward(net, x)
        return gradcore.softmax_cross_entropy(logits, label)[0]

    return f


def _relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8))


@pytest.mark.parametrize("widths", [(6, 16, 16, 4), (5, 12, 12, 12, 3)])
def test_input_gradient_matches_finite_differences(widths):
    net = random_net(widths, seed=11)
    x = np.random.default_rng(2).uniform(0, 1, widths[0])
    logits, tape = gradcore.forward(net, x)
    _, dlogits = gradcore.softmax_cross_entropy(logits, 1)
    analytic = gradcore.backward(net, tape, dlogits)
    numeric = central_difference(_loss_of_input(net, 1), x)
    assert _relative_error(analytic, numeric) < 1e-4


def test_parameter_gradients_match_finite_differences():
    net = random_net((4, 9, 7, 3), seed=5)
    x = np.random.default_rng(9).uniform(0, 1, (6, 4))
    y = np.array([0, 1, 2, 0, 1, 2])

    def total_loss(weights, biases):
        n = SimpleNamespace(weights=weights, biases=biases)
        logits, _ = gradcore.forward(n, x)
        return gradcore.softmax_cross_entropy(logits, y)[0].sum()

    logits, tape = gradcore.forward(net, x)
    _, dlogits = gradcore.softmax_cross_entropy(logits, y)
    grads = gradcore.backprop(net, tape, dlogits)
    weights = [np.array(w) for w in net.weights]
    biases = [np.array(b) for b in net.biases]
    for i in range(len(weights)):

        def fw(w, i=i):
            ws = list(weights)
            ws[i] = w
            return total_loss(ws, biases)

        def fb(b, i=i):
            bs = list(biases)
            bs[i] = b
            return total_loss(weights, bs)

        assert _relative_error(grads.weights[i], central_difference(fw, weights[i])) < 1e-4
        assert _relative_error(grads.biases[i], central_difference(fb, biases[i])) < 1e-4


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    widths=st.lists(st.integers(1, 64), min_size=1, max_size=2).map(lambda w: (3, *w, 4)),
)
def test_backward_matches_finite_differences_property(seed, widths):
    net = random_net(widths, seed=seed)
    x = np.random.default_rng(seed).uniform(0, 1, 3)
    label = seed % 4
    logits, tape = gradcore.forward(net, x)
    pre = np.concatenate([layer.pre.ravel() for layer in tape.layers[:-1]])
    if np.min(np.abs(pre)) < 1e-4:
        return  # too close to a ReLU kink for a finite-difference comparison
    _, dlogits = gradcore.softmax_cross_entropy(logits, label)
    analytic = gradcore.backward(net, tape, dlogits)
    numeric = central_difference(_loss_of_input(net, label), x)
    assert _relative_error(analytic, numeric) < 1e-4


def test_override_on_missing_layer_is_configuration_error():
    net = random_net((4, 8, 3))
    logits, tape = gradcore.forward(net, np.ones(4))
    with pytest.raises(ConfigurationError):
        gradcore.backward(net, tape, np.ones(3), {5: gradcore.IdentityThrough()})
    with pytest.raises(ConfigurationError):
        gradcore.backward(net, tape, np.ones(3), {1: gradcore.IdentityThrough()})  # logits layer


def test_hooked_forward_and_override_rules():
    net = random_net((4, 8, 8, 3), seed=2)
    x = np.random.default_rng(0).uniform(0, 1, 4)
    scale = np.array([2.0, 0, 1, 1, 0, 3, 1, 1])

    def hook(i, h):
        return h * scale, np.broadcast_to(scale, h.shape)

    logits, tape = gradcore.forward(net, x, hook)
    g = np.ones(3)
    exact = gradcore.backward(net, tape, g)
    same = gradcore.backward(net, tape, g, {0: gradcore.MaskScale(scale), 1: gradcore.MaskScale(scale)})
    np.testing.assert_array_equal(exact, same)
    # the exact rule is the derivative of the hooked computation
    numeric = central_difference(lambda v: gradcore.forward(net, v, hook)[0].sum(), x)
    assert _relative_error(exact, numeric) < 1e-4
    # identity-through ignores the hook's scale but keeps the ReLU masks of this forward
    through = gradcore.backward(net, tape, g, {0: gradcore.IdentityThrough(), 1: gradcore.IdentityThrough()})
    assert not np.allclose(through, exact)


def test_softmax_cross_entropy_examples():
    loss, grad = gradcore.softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(grad, [-0.5, 0.5])
    loss, _ = gradcore.softmax_cross_entropy(np.array([800.0, 0.0]), 0)
    assert 0 <= loss < 1e-12


def test_softmax_cross_entropy_label_errors():
    with pytest.raises(ValueError):
        gradcore.softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        gradcore.softmax_cross_entropy(np.zeros(3), -1)


def test_softmax_cross_entropy_gradient_finite_differences():
    z = np.random.default_rng(4).normal(0, 3, 7)
    _, grad = gradcore.softmax_cross_entropy(z, 2)
    numeric = central_difference(lambda v: gradcore.softmax_cross_entropy(v, 2)[0], z, step=1e-6)
    assert _relative_error(grad, numeric) < 1e-6


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12), st.integers(0, 11))
def test_softmax_is_stable_for_large_logits(values, label):
    z = np.array(values)
    loss, grad = gradcore.softmax_cross_entropy(z, label % len(values))
    p = gradcore.softmax(z)
    assert np.all(np.isfinite(p)) and np.all(np.isfinite(grad)) and np.isfinite(loss)
    assert loss >= 0
    assert abs(p.sum() - 1) < 1e-12
