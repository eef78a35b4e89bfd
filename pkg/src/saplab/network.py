"""The undefended MLP classifier: construction, SGD training, prediction and
JSON checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from saplab import gradcore, rng
from saplab.errors import ConfigurationError, InputShapeError, TrainingError

REFERENCE_WIDTHS = (32, 128, 128, 10)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ConfigurationError(f"need at least two layers, got widths {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ConfigurationError(f"layer widths must be positive, got {self.widths}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), int(d.get("seed", 0)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "shuffle_seed": self.shuffle_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Network:
    """Weights ``W_i`` of shape ``(m_i, m_{i+1})`` and biases ``b_i``; arrays are
    read-only so a trained network can be shared freely."""

    spec: MlpSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.spec.widths[i], self.spec.widths[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ConfigurationError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with widths {self.spec.widths}"
                )
        if len(self.weights) != self.spec.depth:
            raise ConfigurationError(f"expected {self.spec.depth} layers, got {len(self.weights)}")

    def logits(self, x) -> np.ndarray:
        return gradcore.forward(self, x)[0]


@dataclass
class TrainResult:
    network: Network
    loss_trace: list[float] = field(default_factory=list)


def init_network(spec: MlpSpec) -> Network:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    gen = rng.generator(spec.seed, rng.DOMAIN_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(gen.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return Network(spec, tuple(weights), tuple(biases))


def train(network: Network, x, y, config: TrainConfig) -> TrainResult:
    """Minibatch SGD on mean softmax cross-entropy.

    Shuffling is drawn from ``config.shuffle_seed``, one permutation per epoch,
    so the result depends only on the initial weights, the data and the config.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != network.spec.widths[0]:
        raise InputShapeError(f"training inputs of shape {x.shape} do not match input width {network.spec.widths[0]}")
    if y.shape != (x.shape[0],):
        raise InputShapeError(f"expected {x.shape[0]} labels, got {y.shape}")
    if np.any(y < 0) or np.any(y >= network.spec.n_classes):
        raise InputShapeError(f"labels must lie in [0, {network.spec.n_classes})")
    if config.batch_size > x.shape[0]:
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds dataset size {x.shape[0]}")

    weights = [np.array(w) for w in network.weights]
    biases = [np.array(b) for b in network.biases]
    work = SimpleNamespace(weights=weights, biases=biases)  # mutable stand-in for gradcore

    n = x.shape[0]
    lr = config.learning_rate
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.generator(config.shuffle_seed, rng.DOMAIN_SHUFFLE, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits, tape = gradcore.forward(work, x[idx])
            loss, dlogits = gradcore.softmax_cross_entropy(logits, y[idx])
            total += float(loss.sum())
            grads = gradcore.backprop(work, tape, dlogits / len(idx))
            for i in range(len(weights)):
                weights[i] -= lr * grads.weights[i]
                biases[i] -= lr * grads.biases[i]
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch} (loss {epoch_loss})", epoch)
        trace.append(epoch_loss)
    return TrainResult(Network(network.spec, tuple(weights), tuple(biases)), trace)


def predict_clean(network: Network, x) -> tuple[np.ndarray, np.ndarray]:
    """Label and class probabilities of the undefended network. Ties go to the
    lowest class index."""
    probs = gradcore.softmax(network.logits(x))
    return np.argmax(probs, axis=-1), probs


def accuracy(network: Network, x, y) -> float:
    return float(np.mean(predict_clean(network, x)[0] == np.asarray(y)))


def checkpoint_dict(network: Network, metadata: dict | None = None) -> dict:
    return {
        "spec": network.spec.to_dict(),
        "weights": [
            {"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(network.weights, network.biases)
        ],
        "metadata": metadata or {},
    }


def network_from_dict(d: dict) -> tuple[Network, dict]:
    spec = MlpSpec.from_dict(d["spec"])
    weights = tuple(np.array(layer["weight"], dtype=np.float64) for layer in d["weights"])
    biases = tuple(np.array(layer["bias"], dtype=np.float64) for layer in d["weights"])
    return Network(spec, weights, biases), d.get("metadata", {})


def save_checkpoint(network: Network, path, metadata: dict | None = None) -> Path:
    # json writes floats with repr(), the shortest string that round-trips.
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(network, metadata), sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[Network, dict]:
    return network_from_dict(json.loads(Path(path).read_text()))
