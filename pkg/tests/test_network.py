import json
import math

import numpy as np
import pytest

from saplab import network
from saplab.errors import ConfigurationError, TrainingError
from conftest import random_net


def blobs(n=200, seed=0):
    gen = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.array([[0.25, 0.25, 0.25], [0.75, 0.75, 0.75]])
    return np.clip(centers[y] + 0.05 * gen.standard_normal((n, 3)), 0, 1), y


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        network.MlpSpec((4, 3))
    with pytest.raises(ConfigurationError):
        network.MlpSpec((4, 0, 3))


def test_init_shapes_and_determinism():
    spec = network.MlpSpec((4, 8, 3), seed=9)
    a, b = network.init_network(spec), network.init_network(spec)
    assert [w.shape for w in a.weights] == [(4, 8), (8, 3)]
    assert all(np.array_equal(u, v) for u, v in zip(a.weights, b.weights))
    assert all(np.all(bias == 0) for bias in a.biases)


def test_init_std_monte_carlo():
    net = network.init_network(network.MlpSpec((1000, 1000, 2), seed=1))
    std = net.weights[0].std()
    assert abs(std - math.sqrt(2 / 1000)) < 0.05 * math.sqrt(2 / 1000)


def test_weights_are_read_only():
    net = network.init_network(network.MlpSpec((4, 8, 3)))
    with pytest.raises(ValueError):
        net.weights[0][0, 0] = 1.0


def test_train_separable_blobs():
    x, y = blobs()
    net = network.init_network(network.MlpSpec((3, 16, 2), seed=0))
    result = network.train(net, x, y, network.TrainConfig(0.1, 30, 16, 0))
    assert network.accuracy(result.network, x, y) >= 0.99
    assert len(result.loss_trace) == 30


def test_zero_learning_rate_leaves_weights():
    x, y = blobs(64)
    net = network.init_network(network.MlpSpec((3, 8, 2), seed=4))
    trained = network.train(net, x, y, network.TrainConfig(0.0, 2, 8, 0)).network
    assert all(np.array_equal(u, v) for u, v in zip(net.weights, trained.weights))
    assert all(np.array_equal(u, v) for u, v in zip(net.biases, trained.biases))


def test_training_is_deterministic_to_the_byte(tmp_path):
    x, y = blobs(100)
    cfg = network.TrainConfig(0.05, 3, 10, 7)
    paths = []
    for k in range(2):
        net = network.train(network.init_network(network.MlpSpec((3, 8, 2), seed=2)), x, y, cfg).network
        paths.append(network.save_checkpoint(net, tmp_path / f"m{k}.json"))
    assert paths[0].read_bytes() == paths[1].read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch():
    x, y = blobs(64)
    net = network.init_network(network.MlpSpec((3, 8, 2), seed=0))
    with pytest.raises(TrainingError) as info:
        network.train(net, x * 1e200, y, network.TrainConfig(1e10, 3, 8, 0))
    assert info.value.epoch == 0


def test_batch_larger_than_dataset_rejected():
    x, y = blobs(10)
    with pytest.raises(ConfigurationError):
        network.train(network.init_network(network.MlpSpec((3, 4, 2))), x, y, network.TrainConfig(0.1, 1, 11, 0))


def test_reference_loss_trace_decreases(reference_lab):
    trace = reference_lab.meta["loss_trace"]
    smoothed = np.convolve(trace, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smoothed) <= 0)


def fixed_logits(logits):
    """A network whose logits are ``logits`` whatever the input."""
    k = len(logits)
    return network.Network(
        network.MlpSpec((1, 1, k)),
        (np.zeros((1, 1)), np.zeros((1, k))),
        (np.zeros(1), np.asarray(logits, dtype=float)),
    )


def test_predict_clean_examples():
    label, probs = network.predict_clean(fixed_logits([3.0, 1.0, 1.0]), [0.0])
    assert label == 0
    label, _ = network.predict_clean(fixed_logits([1.0, 1.0, 1.0]), [0.0])
    assert label == 0  # ties break toward the lowest index


def test_probabilities_sum_to_one_and_shift_invariance():
    gen = np.random.default_rng(0)
    for seed in range(20):
        net = random_net((5, 12, 9, 4), seed=seed, bias_scale=0.5)
        x = gen.uniform(0, 1, (8, 5))
        labels, probs = network.predict_clean(net, x)
        assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-12)
        shifted = network.Network(net.spec, net.weights, net.biases[:-1] + (net.biases[-1] + 123.0,))
        labels2, probs2 = network.predict_clean(shifted, x)
        assert np.array_equal(labels, labels2)
        np.testing.assert_allclose(probs2, probs, atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = random_net((6, 10, 5, 3), seed=8)
    path = network.save_checkpoint(net, tmp_path / "m.json", {"note": "x"})
    loaded, meta = network.load_checkpoint(path)
    x = np.random.default_rng(1).uniform(0, 1, (4, 6))
    assert np.array_equal(network.Network.logits(net, x), loaded.logits(x))
    assert meta == {"note": "x"}
    doc = json.loads(path.read_text())
    assert set(doc) == {"spec", "weights", "metadata"}


def test_network_rejects_inconsistent_shapes():
    spec = network.MlpSpec((3, 4, 2))
    with pytest.raises(ConfigurationError):
        network.Network(spec, (np.zeros((3, 4)), np.zeros((5, 2))), (np.zeros(4), np.zeros(2)))
