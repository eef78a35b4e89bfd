"""Dense-layer math and reverse-mode differentiation for ReLU MLPs.

Tensors are plain ``numpy.float64`` arrays. A network is anything exposing
``weights`` (list of ``(fan_in, fan_out)`` arrays) and ``biases`` (list of
``(fan_out,)`` arrays); layer ``i`` computes ``relu(a @ W_i + b_i)`` for every
layer but the last, which emits logits.

``forward`` accepts an optional hook that may replace the output of any hidden
layer (SAP uses this). The tape keeps both the raw ReLU output and the local
derivative the hook reports, so ``backward`` can either follow the recorded
computation exactly or substitute a different rule per layer. Substituting a
rule is how the BPDA gradient is expressed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from saplab.errors import ConfigurationError, InputShapeError

# hook(layer_index, h) -> (h_out, local_scale); local_scale is the elementwise
# derivative d h_out / d h used by the exact backward pass.
LayerHook = Callable[[int, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class IdentityThrough:
    """Backward rule: pass the gradient straight through the hooked layer, as
    if the hook were absent."""


@dataclass(frozen=True)
class MaskScale:
    """Backward rule: multiply the incoming gradient by ``scale`` elementwise."""

    scale: np.ndarray


@dataclass
class LayerTape:
    index: int
    inputs: np.ndarray
    pre: np.ndarray
    output: np.ndarray
    hooked: np.ndarray | None = None
    scale: np.ndarray | None = None


@dataclass
class Tape:
    x: np.ndarray
    layers: list[LayerTape]
    batched: bool


@dataclass
class Gradients:
    input: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _check_input(network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2):
        raise InputShapeError(f"expected a vector or a batch of vectors, got shape {x.shape}")
    width = network.weights[0].shape[0]
    if x.shape[-1] != width:
        raise InputShapeError(f"input width {x.shape[-1]} does not match network input width {width}")
    return (x if batched else x[None, :]), batched


def forward(network, x, hook: LayerHook | None = None) -> tuple[np.ndarray, Tape]:
    """Run the network on ``x`` (vector or ``(N, m_0)`` batch) and record a tape."""
    a, batched = _check_input(network, x)
    depth = len(network.weights)
    layers: list[LayerTape] = []
    for i, (w, b) in enumerate(zip(network.weights, network.biases)):
        z = a @ w + b
        if i == depth - 1:
            layers.append(LayerTape(i, a, z, z))
            a = z
            break
        h = relu(z)
        entry = LayerTape(i, a, z, h)
        if hook is not None:
            h_out, scale = hook(i, h)
            entry.hooked = h_out
            entry.scale = scale
            h = h_out
        layers.append(entry)
        a = h
    logits = a if batched else a[0]
    return logits, Tape(np.asarray(x, dtype=np.float64), layers, batched)


def backprop(
    network,
    tape: Tape,
    loss_grad,
    overrides: Mapping[int, object] | None = None,
) -> Gradients:
    """Reverse pass over ``tape``; returns input and parameter gradients.

    ``overrides`` maps a hidden-layer index to :class:`IdentityThrough` or
    :class:`MaskScale`. Without overrides the gradient is the exact chain rule
    of the recorded forward computation.
    """
    overrides = dict(overrides or {})
    depth = len(network.weights)
    for idx, rule in overrides.items():
        if not (0 <= idx < depth - 1):
            raise ConfigurationError(f"override for layer {idx}: no hidden layer with that index")
        if not isinstance(rule, (IdentityThrough, MaskScale)):
            raise ConfigurationError(f"unknown backward override {rule!r} for layer {idx}")

    delta = np.asarray(loss_grad, dtype=np.float64)
    if not tape.batched:
        delta = delta[None, :]
    if delta.shape != tape.layers[-1].pre.shape:
        raise InputShapeError(
            f"loss gradient shape {delta.shape} does not match logits {tape.layers[-1].pre.shape}"
        )

    grad_w: list[np.ndarray] = [None] * depth  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * depth  # type: ignore[list-item]
    for entry in reversed(tape.layers):
        i = entry.index
        if i < depth - 1:
            # delta is d loss / d (layer output as seen by the next layer)
            rule = overrides.get(i)
            if isinstance(rule, MaskScale):
                delta = delta * rule.scale
            elif isinstance(rule, IdentityThrough) or entry.scale is None:
                pass
            else:
                delta = delta * entry.scale
            delta = delta * (entry.pre > 0)
        grad_w[i] = entry.inputs.T @ delta
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ network.weights[i].T

    grad_x = delta if tape.batched else delta[0]
    return Gradients(grad_x, grad_w, grad_b)


def backward(network, tape: Tape, loss_grad, overrides: Mapping[int, object] | None = None) -> np.ndarray:
    """Gradient of the loss with respect to the network input."""
    return backprop(network, tape, loss_grad, overrides).input


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.asarray(logits, dtype=np.float64)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-example cross-entropy loss and its gradient with respect to logits.

    Accepts a single logit vector with an integer label, or an ``(N, C)``
    batch with ``N`` labels. Losses are not reduced.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    n_classes = z.shape[-1]
    if y.shape != (z.shape[0],):
        raise InputShapeError(f"expected {z.shape[0]} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"labels must be integers in [0, {n_classes}), got {labels!r}")
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    if single:
        return loss[0], grad[0]
    return loss, grad


def layer_widths(network) -> Sequence[int]:
    return [network.weights[0].shape[0]] + [w.shape[1] for w in network.weights]
