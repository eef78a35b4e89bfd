"""Counter-based random streams.

Every random number in the lab is a pure function of integer coordinates
(seed, domain, example id, query, pass, layer, draw index). Streams never
carry state, so evaluation order, batching and chunking cannot change a
result.

The mixing function is the SplitMix64 finalizer applied to a Weyl sequence,
vectorized over numpy ``uint64`` arrays.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_MASK64 = (1 << 64) - 1

# Domain tags keep the stream families apart.
DOMAIN_PRUNE = 1
DOMAIN_ATTACK_GRAD = 2
DOMAIN_TARGET = 3
DOMAIN_DATA = 4
DOMAIN_INIT = 5
DOMAIN_SHUFFLE = 6


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind == "u":
        return arr.astype(np.uint64)
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).astype(np.uint64)
    raise TypeError(f"stream coordinates must be integers, got {arr.dtype}")


def stream_key(seed: int, *coords) -> np.ndarray:
    """Hash a seed and any number of (broadcastable) integer coordinates into
    64-bit stream keys."""
    with np.errstate(over="ignore"):
        key = _mix(np.atleast_1d(np.uint64(int(seed) & _MASK64)) + _GOLDEN)
        for c in coords:
            key = _mix(key ^ _mix(_as_u64(c) + _GOLDEN))
    return key


def uniforms(keys: np.ndarray, n: int) -> np.ndarray:
    """Draw ``n`` uniforms in [0, 1) per key; result shape ``keys.shape + (n,)``."""
    keys = np.asarray(keys, dtype=np.uint64)
    ctr = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix(keys[..., None] + ctr * _GOLDEN)
    return (bits >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)


def generator(seed: int, *coords) -> np.random.Generator:
    """A numpy Generator seeded from a derived key; used for the sequential
    jobs (data generation, init, shuffling) that need normal variates."""
    key = int(stream_key(seed, *coords).ravel()[0])
    return np.random.Generator(np.random.Philox(key=key))
