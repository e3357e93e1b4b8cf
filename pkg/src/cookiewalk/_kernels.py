"""Compiled hot loop for fixed-horizon walk ensembles.

The hash chain here mirrors :mod:`cookiewalk.rng` operation for operation, so
a replica stepped by this kernel is bit-identical to one stepped through the
numpy engine or the scalar coin field.  Only the fixed-steps stop rule lives
here; every other stop rule stays on the numpy path.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f
        return wrap

    prange = range

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TAG_COIN = np.uint64(0xC01FC01FC01FC01F)
_TAG_ENV_F = np.uint64(0x0E57A7E5F02DEAD1)
_TAG_ENV_B = np.uint64(0x0E57A7E5BAC2DEAD)
_INV53 = 2.0 ** -53


@njit(cache=True, inline="always")
def _mix64(z):
    z = z + _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _walk_fixed_steps(
    n_steps,
    env_seeds,
    coin_seeds,
    prob_table,
    init_cum,
    fwd_cum,
    bwd_cum,
    allow_negative,
):
    reps = env_seeds.shape[0]
    m_height = prob_table.shape[1] - 1
    out = np.empty(reps, dtype=np.int64)
    size = 2 * n_steps + 1
    counts = np.zeros(size, dtype=np.uint32)
    states = np.zeros(size, dtype=np.int16)
    err = np.int64(-1)
    for r in range(reps):
        env_pre_f = _mix64(env_seeds[r] ^ _TAG_ENV_F)
        env_pre_b = _mix64(env_seeds[r] ^ _TAG_ENV_B)
        coin_pre = _mix64(coin_seeds[r] ^ _TAG_COIN)
        # site 0 state from the initial law
        u = np.float64(_mix64(env_pre_f ^ np.uint64(0)) >> np.uint64(11)) * _INV53
        st = 0
        while u >= init_cum[st]:
            st += 1
        states[n_steps] = st
        known_lo = 0
        known_hi = 0
        x = np.int64(0)
        lo_x = np.int64(0)
        hi_x = np.int64(0)
        for _ in range(n_steps):
            if x > known_hi:
                prev = states[n_steps + known_hi]
                u = np.float64(_mix64(env_pre_f ^ np.uint64(x)) >> np.uint64(11)) * _INV53
                st = 0
                while u >= fwd_cum[prev, st]:
                    st += 1
                states[n_steps + x] = st
                known_hi = x
            elif x < known_lo:
                if not allow_negative:
                    err = r
                    break
                prev = states[n_steps + known_lo]
                u = np.float64(_mix64(env_pre_b ^ np.uint64(x)) >> np.uint64(11)) * _INV53
                st = 0
                while u >= bwd_cum[prev, st]:
                    st += 1
                states[n_steps + x] = st
                known_lo = x
            idx = n_steps + x
            c = counts[idx]
            counts[idx] = c + np.uint32(1)
            ci = c if c < m_height else m_height
            p = prob_table[states[idx], ci]
            h = _mix64(_mix64(coin_pre ^ np.uint64(x)) ^ (np.uint64(c) + np.uint64(1)))
            if np.float64(h >> np.uint64(11)) * _INV53 < p:
                x += 1
                if x > hi_x:
                    hi_x = x
            else:
                x -= 1
                if x < lo_x:
                    lo_x = x
        if err == r:
            out[r] = np.int64(-(2 ** 62))
            err = np.int64(-1)
        else:
            out[r] = x
        counts[n_steps + lo_x: n_steps + hi_x + 1] = np.uint32(0)
        states[n_steps + lo_x: n_steps + hi_x + 1] = np.int16(0)
    return out


def walk_fixed_steps(
    n_steps: int,
    env_seeds: np.ndarray,
    coin_seeds: np.ndarray,
    prob_table: np.ndarray,
    init_cum: np.ndarray,
    fwd_cum: np.ndarray,
    bwd_cum: np.ndarray,
    allow_negative: bool,
) -> np.ndarray:
    out = _walk_fixed_steps(
        np.int64(n_steps),
        env_seeds.astype(np.uint64),
        coin_seeds.astype(np.uint64),
        prob_table.astype(np.float64),
        init_cum.astype(np.float64),
        fwd_cum.astype(np.float64),
        bwd_cum.astype(np.float64),
        allow_negative,
    )
    if np.any(out == -(2 ** 62)):
        from .errors import TwoSidedNonStationary

        raise TwoSidedNonStationary(
            "walk reached a negative site with a non-stationary initial law"
        )
    return out
