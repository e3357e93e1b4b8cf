"""Counter-based deterministic random streams.

Every random quantity in the package is a pure function of a 64-bit seed and
integer counters (site, visit, replica index, ...), so identical draws can be
regenerated anywhere without storing them.  The mixer is the SplitMix64
finalizer, applied to a chain of counter words; scalar and vectorized paths
produce bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Domain separation constants: independent streams from one base seed.
TAG_COIN = 0xC01FC01FC01FC01F
TAG_ENV_FORWARD = 0x0E57A7E5F02DEAD1
TAG_ENV_BACKWARD = 0x0E57A7E5BAC2DEAD
TAG_STREAM = 0x57AEA11D5EEDC0DE


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (wrapping at 64 bits)."""
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (elementwise, wrapping)."""
    z = z + np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _u64(x: int) -> int:
    return x & _MASK


def hash2(seed: int, a: int) -> int:
    return mix64(mix64(_u64(seed)) ^ _u64(a))


def hash3(seed: int, a: int, b: int) -> int:
    return mix64(mix64(mix64(_u64(seed)) ^ _u64(a)) ^ _u64(b))


def uniform_from_hash(h: int) -> float:
    """Map a 64-bit hash to a float64 uniform on [0, 1) with 53-bit resolution."""
    return (h >> 11) * 2.0 ** -53


def uniform_from_hash_array(h: np.ndarray) -> np.ndarray:
    return (h >> np.uint64(11)) * 2.0 ** -53


def coin_hash(seed: int, site: int, visit: int) -> int:
    """Hash for the coin at (site, visit); visit is 1-based."""
    return hash3(seed ^ TAG_COIN, site, visit)


def coin_hash_array(seed_arr: np.ndarray, site: np.ndarray, visit: np.ndarray) -> np.ndarray:
    h = mix64_array(seed_arr ^ np.uint64(TAG_COIN))
    h = mix64_array(h ^ site.astype(np.uint64))
    return mix64_array(h ^ visit.astype(np.uint64))


def env_uniform(seed: int, site: int) -> float:
    """Uniform used to draw the stack state at a site (one per site)."""
    tag = TAG_ENV_FORWARD if site >= 0 else TAG_ENV_BACKWARD
    return uniform_from_hash(hash2(seed ^ tag, site))


def env_uniform_array(seed_arr: np.ndarray, site: int) -> np.ndarray:
    tag = TAG_ENV_FORWARD if site >= 0 else TAG_ENV_BACKWARD
    h = mix64_array(seed_arr ^ np.uint64(tag))
    h = mix64_array(h ^ np.uint64(np.int64(site).astype(np.uint64)))
    return uniform_from_hash_array(h)


def derive_seed(base: int, index: int) -> int:
    """Seed for an indexed substream (replica, batch, ...)."""
    return hash2(base ^ TAG_STREAM, index)


def derive_seed_array(base: int, indices: np.ndarray) -> np.ndarray:
    h = mix64_array(np.full(indices.shape, _u64(base) ^ TAG_STREAM, dtype=np.uint64))
    return mix64_array(h ^ indices.astype(np.uint64))


def generator(seed: int, *counters: int) -> np.random.Generator:
    """A numpy Generator whose state is a pure function of (seed, counters).

    Used by samplers that consume a sequential stream (negative binomial
    tails, diffusion increments); parallel episodes derive disjoint streams.
    """
    s = _u64(seed) ^ TAG_STREAM
    for c in counters:
        s = hash2(s, c)
    return np.random.Generator(np.random.PCG64(s))
