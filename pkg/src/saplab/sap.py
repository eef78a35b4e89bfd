"""Stochastic Activation Pruning.

After every hidden ReLU layer, activation ``j`` is retained with probability
``q_j = 1 - (1 - p_j)^r`` where ``p_j = |h_j| / sum_k |h_k|``, and a retained
activation is divided by ``q_j`` so the layer output is unbiased. Two ways of
drawing the retained set are supported:

* ``multinomial``: ``r`` categorical draws with replacement; the retained set is
  the set of distinct indices drawn.
* ``binomial``: each neuron kept independently with probability ``q_j``.

Both give the same per-neuron marginal ``q_j``. A stochastic model's decision
is the argmax of the average over ``passes`` independent forward passes.

All randomness comes from counter-based streams keyed on
``(seed, example id, query, pass, layer)``, see :mod:`saplab.rng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from saplab import gradcore, rng
from saplab.errors import ConfigurationError, SapLabError

SCHEMES = ("multinomial", "binomial")
AVERAGING = ("probabilities", "logits")

# rows (examples x passes) evaluated per chunk in averaged_predict
_CHUNK_ROWS = 8192


@dataclass(frozen=True)
class SapConfig:
    r_multiplier: float = 1.0
    scheme: str = "multinomial"
    passes: int = 100
    seed: int = 0
    average: str = "probabilities"

    def __post_init__(self):
        if not self.r_multiplier > 0:
            raise ConfigurationError(f"r_multiplier must be > 0, got {self.r_multiplier}")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if int(self.passes) != self.passes or self.passes < 1:
            raise ConfigurationError(f"passes must be a positive integer, got {self.passes}")
        if self.average not in AVERAGING:
            raise ConfigurationError(f"average must be one of {AVERAGING}, got {self.average!r}")

    def draws(self, width: int) -> int:
        """Number of draws ``r`` for a layer of the given width (half-up rounding, at least 1)."""
        return max(1, int(math.floor(self.r_multiplier * width + 0.5)))

    def to_dict(self) -> dict:
        d = {
            "r_multiplier": self.r_multiplier,
            "scheme": self.scheme,
            "passes": self.passes,
            "seed": self.seed,
        }
        if self.average != "probabilities":
            d["average"] = self.average
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SapConfig":
        unknown = set(d) - {"r_multiplier", "scheme", "passes", "seed", "average"}
        if unknown:
            raise ConfigurationError(f"unknown SAP config keys {sorted(unknown)}")
        return cls(
            r_multiplier=float(d.get("r_multiplier", 1.0)),
            scheme=d.get("scheme", "multinomial"),
            passes=int(d.get("passes", 100)),
            seed=int(d.get("seed", 0)),
            average=d.get("average", "probabilities"),
        )


@dataclass
class PruneSample:
    """One layer's pruning draw: retention probabilities, keep probabilities
    and the boolean retained mask (all with the activation's shape)."""

    p: np.ndarray
    q: np.ndarray
    mask: np.ndarray


def retention_probs(h) -> np.ndarray:
    """``|h_j| / sum_k |h_k|`` along the last axis.

    A row whose activations are all zero has no distribution; it comes back as
    an all-zero row, which every downstream function treats as "prune
    everything".
    """
    a = np.abs(np.asarray(h, dtype=np.float64))
    total = a.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = a / total
    return np.where(total > 0, p, 0.0)


def is_degenerate(p) -> np.ndarray:
    return ~np.any(np.asarray(p) > 0, axis=-1)


def keep_prob(p, r: int) -> np.ndarray:
    """``1 - (1 - p)^r`` evaluated as ``-expm1(r * log1p(-p))``; ``r == 1``
    returns ``p`` unchanged."""
    p = np.asarray(p, dtype=np.float64)
    if r < 1 or int(r) != r:
        raise ConfigurationError(f"r must be a positive integer, got {r}")
    if r == 1:
        return p.copy()
    with np.errstate(divide="ignore"):
        return 0.0 - np.expm1(r * np.log1p(-p))


def _uniform_source(source, batch_shape: tuple[int, ...], n: int) -> np.ndarray:
    if isinstance(source, np.random.Generator):
        return source.random(batch_shape + (n,))
    keys = np.broadcast_to(np.asarray(source, dtype=np.uint64), batch_shape)
    return rng.uniforms(keys, n)


def _categorical_draws(p2: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draws: ``u`` is ``(rows, r)``, returns indices.

    Rows are searched in one flat ``searchsorted`` by offsetting row ``i``'s CDF
    and uniforms by ``i``. Zero-probability indices share their predecessor's
    CDF value and can never be returned by a right-sided search.
    """
    rows, m = p2.shape
    cdf = np.cumsum(p2, axis=1)
    cdf /= cdf[:, -1:]
    offsets = np.arange(rows, dtype=np.float64)[:, None]
    flat_cdf = (cdf + offsets).ravel()
    # draw order is irrelevant to the retained set; sorted needles search much faster
    needles = (np.sort(u, axis=1) + offsets).ravel()
    idx = np.searchsorted(flat_cdf, needles, side="right").reshape(u.shape)
    idx -= (np.arange(rows) * m)[:, None]
    # offset rounding can push a uniform within 2**-37 of 1 past the row end
    last = m - 1 - np.argmax(p2[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last[:, None])


def sample_mask(p, r: int, scheme: str, source) -> np.ndarray:
    """Draw the retained set for each row of ``p``.

    ``source`` is a ``numpy.random.Generator`` or an array of stream keys (one
    per row, see :func:`saplab.rng.stream_key`).
    """
    p = np.asarray(p, dtype=np.float64)
    if scheme not in SCHEMES:
        raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    batch_shape = p.shape[:-1]
    m = p.shape[-1]
    p2 = p.reshape(-1, m)
    live = ~is_degenerate(p2)
    mask = np.zeros(p2.shape, dtype=bool)
    if scheme == "binomial":
        u = _uniform_source(source, batch_shape, m).reshape(-1, m)
        q = keep_prob(p2, r)
        mask = (u < q) & live[:, None]
    else:
        u = _uniform_source(source, batch_shape, r).reshape(-1, r)
        if live.any():
            rows = np.flatnonzero(live)
            idx = _categorical_draws(p2[rows], u[rows])
            mask[rows[:, None], idx] = True
    return mask.reshape(p.shape)


def apply_sap(h, mask, q) -> np.ndarray:
    """``h_j / q_j`` where ``mask`` is set, zero elsewhere."""
    h = np.asarray(h, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    q = np.asarray(q, dtype=np.float64)
    if np.any(mask & (q <= 0)):
        raise SapLabError("retained a neuron whose keep probability is zero")
    safe_q = np.where(mask, q, 1.0)
    return np.where(mask, h / safe_q, 0.0)


def prune_keys(config: SapConfig, example_ids, query, pass_index, layer: int, domain: int = rng.DOMAIN_PRUNE):
    return rng.stream_key(config.seed, domain, example_ids, query, pass_index, layer)


def prune_layer(h: np.ndarray, r: int, scheme: str, keys) -> tuple[np.ndarray, np.ndarray, PruneSample]:
    """Prune one layer; returns ``(h_hat, scale, sample)`` where ``scale`` is the
    fixed-mask derivative ``mask / q``."""
    p = retention_probs(h)
    q = keep_prob(p, r)
    mask = sample_mask(p, r, scheme, keys)
    h_hat = apply_sap(h, mask, q)
    scale = np.where(mask, 1.0 / np.where(mask, q, 1.0), 0.0)
    return h_hat, scale, PruneSample(p, q, mask)


def sap_hook(
    config: SapConfig,
    example_ids,
    query,
    pass_index,
    samples: list | None = None,
    domain: int = rng.DOMAIN_PRUNE,
):
    """A :func:`saplab.gradcore.forward` hook that prunes every hidden layer."""

    def hook(layer: int, h: np.ndarray):
        r = config.draws(h.shape[-1])
        keys = prune_keys(config, example_ids, query, pass_index, layer, domain)
        h_hat, scale, sample = prune_layer(h, r, config.scheme, keys)
        if samples is not None:
            samples.append(sample)
        return h_hat, scale

    return hook


def _row_coords(x: np.ndarray, example_ids, pass_index):
    n = x.shape[0] if x.ndim == 2 else 1
    ids = np.zeros(n, dtype=np.int64) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    ids = np.broadcast_to(ids, (n,))
    passes = np.broadcast_to(np.asarray(pass_index, dtype=np.int64), (n,))
    return ids, passes


def sap_forward(network, x, config: SapConfig, pass_index=0, example_ids=None, query=0):
    """One stochastic forward pass; returns ``(logits, [PruneSample per hidden layer])``.

    ``x`` may be a single vector or an ``(N, m_0)`` batch; ``example_ids`` and
    ``pass_index`` may be scalars or per-row arrays. The logits layer is never
    pruned.
    """
    x = np.asarray(x, dtype=np.float64)
    ids, passes = _row_coords(x, example_ids, pass_index)
    samples: list[PruneSample] = []
    logits, _ = gradcore.forward(network, x, sap_hook(config, ids, query, passes, samples))
    if x.ndim == 1:
        samples = [PruneSample(s.p[0], s.q[0], s.mask[0]) for s in samples]
    return logits, samples


def sap_forward_taped(network, x, config: SapConfig, pass_index=0, example_ids=None, query=0):
    """Like :func:`sap_forward` but returns the gradcore tape for backward."""
    x = np.asarray(x, dtype=np.float64)
    ids, passes = _row_coords(x, example_ids, pass_index)
    return gradcore.forward(network, x, sap_hook(config, ids, query, passes))


def averaged_predict(network, x, config: SapConfig, example_ids=None, query=0):
    """Decision of the defended model: argmax of the mean over ``config.passes``
    stochastic passes (lowest index wins ties). Returns ``(labels, mean_probs)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    n = xb.shape[0]
    ids, _ = _row_coords(xb, example_ids, 0)
    k = config.passes
    out = np.empty((n, network.weights[-1].shape[1]))
    per_chunk = max(1, _CHUNK_ROWS // k)
    for start in range(0, n, per_chunk):
        stop = min(n, start + per_chunk)
        rows = np.repeat(xb[start:stop], k, axis=0)
        row_ids = np.repeat(ids[start:stop], k)
        row_pass = np.tile(np.arange(k, dtype=np.int64), stop - start)
        logits, _ = gradcore.forward(network, rows, sap_hook(config, row_ids, query, row_pass))
        logits = logits.reshape(stop - start, k, -1)
        if config.average == "probabilities":
            out[start:stop] = gradcore.softmax(logits).mean(axis=1)
        else:
            out[start:stop] = gradcore.softmax(logits.mean(axis=1))
    labels = np.argmax(out, axis=-1)
    if single:
        return labels[0], out[0]
    return labels, out
