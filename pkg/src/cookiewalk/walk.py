"""Excited random walk simulation through per-(site, visit) coins.

A walk consumes one coin per (site, visit) pair: the coin at (k, i) succeeds
with the i-th cookie probability at site k, and the walker steps right on a
success.  Coins are a pure hash of (seed, site, visit), so a walk and any
branching construction reading the same field consume literally the same
coins: the coupling identities hold pathwise, and every run is reproducible
from its two seeds.

Single episodes (`run_walk`) keep their entire path for crossing counts; the
ensemble runner vectorizes thousands of independent replicas for velocity,
limit-law and backtracking estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .analysis import classify_phase
from .environment import EnvironmentRealization, StackChainSpec, realize_environment
from .errors import PhaseGuard, RegimeMismatch, Truncated, TwoSidedNonStationary

DEFAULT_STEP_CAP = 10 ** 8
_CELL_BUDGET = 2 * 10 ** 8  # count cells per ensemble batch


# ---------------------------------------------------------------------------
# coins
# ---------------------------------------------------------------------------

class CoinField:
    """Deterministic map (site, visit) -> coin outcome with the cookie bias.

    Outcomes are regenerated from (seed, site, visit) on every query, so the
    field never stores anything and repeated queries agree by construction.
    Visits beyond the stack height bypass the environment and use a fair coin.
    """

    def __init__(self, realization: EnvironmentRealization, seed: int):
        self.realization = realization
        self.seed = int(seed)

    def prob(self, site: int, visit: int) -> float:
        return self.realization.prob(site, visit)

    def outcome(self, site: int, visit: int) -> int:
        u = rng.uniform_from_hash(rng.coin_hash(self.seed, site, visit))
        return 1 if u < self.prob(site, visit) else 0


class ConstantCoins:
    """Stub field with a forced outcome; handy for degenerate-path tests."""

    def __init__(self, outcome: int):
        self._outcome = int(outcome)

    def prob(self, site: int, visit: int) -> float:
        return 1.0 if self._outcome else 0.0

    def outcome(self, site: int, visit: int) -> int:
        return self._outcome


# ---------------------------------------------------------------------------
# single episodes
# ---------------------------------------------------------------------------

@dataclass
class WalkPath:
    start: int
    positions: np.ndarray
    truncated: bool = False
    hit_times: dict = field(default_factory=dict)   # level -> first passage time

    @property
    def steps(self) -> int:
        return len(self.positions) - 1

    def hitting_time(self, level: int) -> int | None:
        if level in self.hit_times:
            return self.hit_times[level]
        hits = np.flatnonzero(self.positions == level)
        return int(hits[0]) if hits.size else None


def run_walk(
    coins,
    start: int = 0,
    steps: int | None = None,
    level: int | None = None,
    return_to: int | None = None,
    step_cap: int = DEFAULT_STEP_CAP,
) -> WalkPath:
    """Run one walk until exactly one of the stop conditions fires.

    ``steps`` runs a fixed number of steps; ``level`` stops at first passage
    of a site; ``return_to`` stops on the first return to a site at a time
    >= 1.  Paths that hit the cap come back flagged truncated, never dropped.
    """
    chosen = [x is not None for x in (steps, level, return_to)]
    if sum(chosen) != 1:
        raise ValueError("specify exactly one of steps=, level=, return_to=")
    cap = steps if steps is not None else step_cap
    positions = [start]
    visits: dict[int, int] = {}
    x = start
    truncated = False
    hit_times: dict[int, int] = {}
    t = 0
    while True:
        if steps is not None and t >= steps:
            break
        if t >= cap:
            truncated = True
            break
        i = visits.get(x, 0) + 1
        visits[x] = i
        x += 1 if coins.outcome(x, i) else -1
        t += 1
        positions.append(x)
        if x not in hit_times:
            hit_times[x] = t
        if level is not None and x == level:
            break
        if return_to is not None and x == return_to:
            break
    return WalkPath(start, np.array(positions, dtype=np.int64), truncated, hit_times)


def down_crossings(path: WalkPath, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of left traversals of each edge (k, k-1) before first passage of n.

    Returns (sites, counts) with sites ascending.  The bookkeeping identity
    first-passage-time = n + 2 * sum(counts) holds exactly on every complete
    path and is asserted here.
    """
    tau = path.hitting_time(n)
    if path.truncated or tau is None:
        raise Truncated(f"path never reached level {n}")
    pos = path.positions[: tau + 1]
    steps_left = pos[1:] < pos[:-1]
    from_sites = pos[:-1][steps_left]
    lo = int(pos.min())
    counts = np.bincount(from_sites - lo, minlength=n - lo + 1)
    sites = np.arange(lo, n + 1)
    assert tau == n - path.start + 2 * int(counts.sum())
    return sites, counts


def up_crossings_before_return(path: WalkPath) -> np.ndarray:
    """Right jumps from each site k >= 1 before the walk's return to 0.

    The path should have been started at 1 with return_to=0; on truncated
    paths the counts cover the capped horizon (and are then dominated by the
    forward branching values rather than equal to them).
    """
    pos = path.positions
    steps_right = pos[1:] > pos[:-1]
    from_sites = pos[:-1][steps_right]
    hi = int(pos.max())
    counts = np.bincount(from_sites, minlength=hi + 2)
    return counts[1:]  # index 0 -> site 1


# ---------------------------------------------------------------------------
# vectorized ensembles
# ---------------------------------------------------------------------------

class _Ensemble:
    """Fixed batch of independent replicas sharing one stepping loop.

    Rows are replicas; the site window [lo, hi] is shared and grows on
    demand.  Replica r's environment and coins come from seeds derived from
    (env_seed, r) and (coin_seed, r), so any single row reproduces exactly as
    a standalone realization + coin field with those derived seeds.
    """

    def __init__(
        self,
        spec: StackChainSpec,
        rep_ids: np.ndarray,
        env_seed: int,
        coin_seed: int,
        start: int = 0,
        strict: bool = True,
        track_left: bool = False,
        track_right: bool = False,
    ):
        self.spec = spec
        self.R = len(rep_ids)
        self.env_seeds = rng.derive_seed_array(env_seed, rep_ids)
        self.coin_seeds = rng.derive_seed_array(coin_seed, rep_ids)
        self.strict = strict
        self.start = start
        self.M = spec.height
        self.prob_table = spec.stack_probs_table()
        self._fwd_cum = np.cumsum(spec.kernel, axis=1)
        self._bwd_cum = np.cumsum(spec.kernel_reversed, axis=1)
        self._init_cum = np.cumsum(spec.initial)
        self.track_left = track_left
        self.track_right = track_right

        self.lo = min(start, 0) - 8
        self.hi = max(start, 8) + 8
        w = self.hi - self.lo + 1
        self.states = np.full((self.R, w), -1, dtype=np.int16)
        self.counts = np.zeros((self.R, w), dtype=np.uint32)
        self.left = np.zeros((self.R, w), dtype=np.uint32) if track_left else None
        self.right = np.zeros((self.R, w), dtype=np.uint32) if track_right else None
        u0 = rng.env_uniform_array(self.env_seeds, 0)
        self.states[:, -self.lo] = (
            (u0[:, None] >= self._init_cum[None, :]).sum(axis=1).astype(np.int16)
        )
        self._known_lo = 0   # filled state columns cover [_known_lo, _known_hi]
        self._known_hi = 0
        self.X = np.full(self.R, start, dtype=np.int64)
        self._ensure_filled(start, start)

    @property
    def W(self) -> int:
        return self.hi - self.lo + 1

    def _col(self, site: int) -> int:
        return site - self.lo

    def _ensure_filled(self, site_min: int, site_max: int) -> None:
        """Extend the sampled state columns to cover [site_min, site_max]."""
        for site in range(self._known_hi + 1, site_max + 1):
            prev = self.states[:, self._col(site - 1)].astype(np.int64)
            u = rng.env_uniform_array(self.env_seeds, site)
            rows = self._fwd_cum[prev]
            self.states[:, self._col(site)] = (u[:, None] >= rows).sum(axis=1).astype(np.int16)
            self._known_hi = site
        if site_min < self._known_lo and self.strict and not self.spec.initial_is_stationary:
            raise TwoSidedNonStationary(
                "walk reached a negative site with a non-stationary initial law"
            )
        for site in range(self._known_lo - 1, site_min - 1, -1):
            prev = self.states[:, self._col(site + 1)].astype(np.int64)
            u = rng.env_uniform_array(self.env_seeds, site)
            rows = self._bwd_cum[prev]
            self.states[:, self._col(site)] = (u[:, None] >= rows).sum(axis=1).astype(np.int16)
            self._known_lo = site

    def _grow(self, lo_new: int, hi_new: int) -> None:
        if lo_new >= self.lo and hi_new <= self.hi:
            return
        lo2 = min(self.lo, lo_new - max(256, self.W // 2)) if lo_new < self.lo else self.lo
        hi2 = max(self.hi, hi_new + max(256, self.W // 2)) if hi_new > self.hi else self.hi
        w2 = hi2 - lo2 + 1
        if self.R * w2 > _CELL_BUDGET:
            raise MemoryError(
                f"ensemble window {w2} x {self.R} replicas exceeds the cell budget; "
                "use smaller batches"
            )
        off = self.lo - lo2

        def moved(arr, fillval):
            if arr is None:
                return None
            out = np.full((self.R, w2), fillval, dtype=arr.dtype)
            out[:, off:off + self.W] = arr
            return out

        self.states = moved(self.states, -1)
        self.counts = moved(self.counts, 0)
        self.left = moved(self.left, 0)
        self.right = moved(self.right, 0)
        self.lo, self.hi = lo2, hi2

    def step(self, act: np.ndarray) -> np.ndarray:
        """Advance the given replica rows by one step; returns the coin array."""
        x = self.X[act]
        self._ensure_filled(int(x.min()), int(x.max()))
        flat = act * self.W + (x - self.lo)
        c = self.counts.ravel()[flat]
        st = self.states.ravel()[flat].astype(np.int64)
        p = self.prob_table[st, np.minimum(c, self.M)]
        h = rng.coin_hash_array(self.coin_seeds[act], x.astype(np.uint64), (c + 1).astype(np.uint64))
        coin = rng.uniform_from_hash_array(h) < p
        self.counts.ravel()[flat] = c + 1
        if self.left is not None:
            self.left.ravel()[flat] += ~coin
        if self.right is not None:
            self.right.ravel()[flat] += coin
        x = x + np.where(coin, 1, -1)
        self.X[act] = x
        xmin, xmax = int(x.min()), int(x.max())
        if xmax > self.hi or xmin < self.lo:
            self._grow(xmin, xmax)
        return coin

    def left_counts_at(self, sites: np.ndarray) -> np.ndarray:
        cols = sites - self.lo
        return self.left[:, cols].astype(np.int64)


@dataclass
class EnsembleResult:
    X: np.ndarray
    steps: np.ndarray
    truncated: np.ndarray
    taus: np.ndarray | None = None       # (R, len(record_levels))
    engine: object = None

    @property
    def truncated_fraction(self) -> float:
        return float(self.truncated.mean())


def walk_ensemble(
    spec: StackChainSpec,
    reps: int,
    seed: int,
    start: int = 0,
    steps: int | None = None,
    level: int | None = None,
    return_to: int | None = None,
    record_levels: np.ndarray | None = None,
    step_cap: int = DEFAULT_STEP_CAP,
    strict: bool = True,
    track_left: bool = False,
    rep_offset: int = 0,
    keep_engine: bool = False,
) -> EnsembleResult:
    """Run `reps` independent replicas with a common stop rule.

    Seeds: replica r uses environment stream (seed, 2r) and coin stream
    (seed, 2r+1) through the derivation in :mod:`cookiewalk.rng`.  Exactly one
    stop rule applies; ``record_levels`` additionally records first-passage
    times of ascending levels while running.
    """
    chosen = [x is not None for x in (steps, level, return_to)]
    if sum(chosen) != 1:
        raise ValueError("specify exactly one of steps=, level=, return_to=")
    rep_ids = np.arange(rep_offset, rep_offset + reps, dtype=np.uint64)
    eng = _Ensemble(
        spec, rep_ids, env_seed=seed, coin_seed=~seed & ((1 << 64) - 1),
        start=start, strict=strict, track_left=track_left,
    )
    horizon = steps if steps is not None else step_cap
    active = np.ones(reps, dtype=bool)
    trunc = np.zeros(reps, dtype=bool)
    steps_taken = np.zeros(reps, dtype=np.int64)
    rec = None
    rec_ptr = None
    if record_levels is not None:
        record_levels = np.asarray(record_levels, dtype=np.int64)
        rec = np.full((reps, len(record_levels)), -1, dtype=np.int64)
        rec_ptr = np.zeros(reps, dtype=np.int64)
    t = 0
    while np.any(active):
        if t >= horizon:
            if steps is None:
                trunc[active] = True
            break
        act = np.flatnonzero(active)
        eng.step(act)
        t += 1
        steps_taken[act] = t
        x = eng.X[act]
        if rec is not None:
            movable = rec_ptr[act] < len(record_levels)
            if np.any(movable):
                sub = act[movable]
                hit = eng.X[sub] == record_levels[rec_ptr[sub]]
                hit_rows = sub[hit]
                rec[hit_rows, rec_ptr[hit_rows]] = t
                rec_ptr[hit_rows] += 1
        if level is not None:
            done = act[x == level]
            active[done] = False
        elif return_to is not None:
            done = act[x == return_to]
            active[done] = False
    return EnsembleResult(
        eng.X.copy(), steps_taken, trunc, rec, engine=eng if keep_engine else None
    )


# ---------------------------------------------------------------------------
# estimators on top of ensembles
# ---------------------------------------------------------------------------

@dataclass
class VelocityEstimate:
    estimate: float
    se: float
    n: int
    reps: int
    truncated_fraction: float
    samples: np.ndarray

    def __str__(self) -> str:
        return f"v = {self.estimate:.6g} +/- {self.se:.2g} (n={self.n}, reps={self.reps})"


def _auto_batches(reps: int, expected_window: int) -> int:
    per = max(64, min(reps, _CELL_BUDGET // (8 * max(expected_window, 1024))))
    return per


def fixed_steps_endpoints(
    spec: StackChainSpec, n: int, reps: int, seed: int, rep_offset: int = 0
) -> np.ndarray:
    """Endpoint X_n per replica; compiled per-replica loop when available.

    The compiled kernel replays exactly the same (seed, site, visit) hash
    chain as the vectorized engine and the scalar coin field, so all three
    produce identical paths replica by replica.
    """
    from . import _kernels

    if _kernels.HAVE_NUMBA:
        rep_ids = np.arange(rep_offset, rep_offset + reps, dtype=np.uint64)
        env_seeds = rng.derive_seed_array(seed, rep_ids)
        coin_seeds = rng.derive_seed_array(~seed & ((1 << 64) - 1), rep_ids)
        allow_negative = spec.initial_is_stationary
        return _kernels.walk_fixed_steps(
            n, env_seeds, coin_seeds, spec.stack_probs_table(),
            np.cumsum(spec.initial), np.cumsum(spec.kernel, axis=1),
            np.cumsum(spec.kernel_reversed, axis=1), allow_negative,
        )
    xs = np.empty(reps, dtype=np.int64)
    batch = _auto_batches(reps, expected_window=min(n, 2 ** 18))
    done = 0
    while done < reps:
        r = min(batch, reps - done)
        res = walk_ensemble(spec, r, seed, steps=n, rep_offset=rep_offset + done)
        xs[done:done + r] = res.X
        done += r
    return xs


def velocity_estimate(spec: StackChainSpec, n: int, reps: int, seed: int) -> VelocityEstimate:
    """Mean displacement per step at horizon n across independent replicas."""
    xs = fixed_steps_endpoints(spec, n, reps, seed)
    v = xs / float(n)
    return VelocityEstimate(
        float(v.mean()), float(v.std(ddof=1) / math.sqrt(reps)), n, reps, 0.0, xs,
    )


_REGIMES = ("i", "ii", "iii", "iv", "v")


@dataclass
class LimitLawSamples:
    regime: str
    n: int
    samples: np.ndarray
    normalization: str
    v_used: float | None
    gamma_used: float | None
    truncated_fraction: float


def limit_law_samples(
    spec: StackChainSpec,
    n: int,
    reps: int,
    regime: str,
    seed: int,
    v: float | None = None,
    gamma: float | None = None,
    strict_regime: bool = True,
) -> LimitLawSamples:
    """Normalized endpoint statistics for the drift regime's limit law.

    Regimes: 'i' X/n^(d/2); 'ii' (X - gamma)/(n/log^2 n) (centering sequence
    supplied by the caller, scale constant not asserted); 'iii' (X - vn)/n^(2/d);
    'iv' (X - vn)/sqrt(n log n); 'v' (X - vn)/sqrt(n).  The regime must match
    the drift's phase unless strict_regime=False (useful for running a
    diffusive environment through the Gaussian normalization).
    """
    regime = regime.strip("()").lower()
    if regime not in _REGIMES:
        raise RegimeMismatch(f"unknown regime {regime!r}")
    phase = classify_phase(spec.delta)
    if strict_regime and phase.regime != regime:
        raise RegimeMismatch(
            f"drift {spec.delta:.4g} is in regime {phase.regime!r}, not {regime!r}"
        )
    d = abs(spec.delta)
    needs_v = regime in ("iii", "iv", "v")
    if needs_v and v is None:
        raise RegimeMismatch(f"regime {regime!r} needs a velocity (estimated or known)")
    if regime == "ii" and gamma is None:
        raise RegimeMismatch("regime 'ii' needs the centering sequence value gamma")

    xf = fixed_steps_endpoints(spec, n, reps, seed).astype(float)
    if regime == "i":
        samples = xf / n ** (d / 2.0)
        desc = "X / n^(delta/2)"
    elif regime == "ii":
        samples = (xf - gamma) / (n / math.log(n) ** 2)
        desc = "(X - gamma(n)) / (n / log^2 n); scale constant not asserted"
    elif regime == "iii":
        samples = (xf - v * n) / n ** (2.0 / d)
        desc = "(X - v n) / n^(2/delta)"
    elif regime == "iv":
        samples = (xf - v * n) / math.sqrt(n * math.log(n))
        desc = "(X - v n) / sqrt(n log n)"
    else:
        samples = (xf - v * n) / math.sqrt(n)
        desc = "(X - v n) / sqrt(n)"
    return LimitLawSamples(
        regime, n, samples, desc, v if needs_v else None,
        gamma if regime == "ii" else None, 0.0,
    )


@dataclass
class BacktrackTail:
    k_grid: np.ndarray
    probs: np.ndarray
    se: np.ndarray
    reps: int
    n: int


def backtrack_tail(
    spec: StackChainSpec,
    n: int,
    k_grid,
    reps: int,
    seed: int,
    buffer: int | None = None,
    step_cap: int = DEFAULT_STEP_CAP,
    batch: int = 4096,
) -> BacktrackTail:
    """Estimate the chance of backtracking to level n after first passing n + k.

    Transient-phase diagnostic (drift > 1): for each k in the grid, the event
    is that the walk dips back to n or below at some time after its first
    passage of n + k.  The infinite horizon is approximated by running until
    the walk clears n + max(k) by a safety buffer; estimates decrease in k.
    """
    if spec.delta <= 1.0:
        raise PhaseGuard(f"backtracking tail needs drift > 1, got {spec.delta:.4g}")
    k_grid = np.asarray(sorted(k_grid), dtype=np.int64)
    k_max = int(k_grid[-1])
    if buffer is None:
        buffer = max(4 * k_max, 200)
    levels = n + k_grid
    top = n + k_max + buffer
    events = np.zeros((reps, len(k_grid)), dtype=bool)
    done = 0
    while done < reps:
        r = min(batch, reps - done)
        ev = _backtrack_batch(spec, r, seed, done, levels, top, n, step_cap)
        events[done:done + r] = ev
        done += r
    p = events.mean(axis=0)
    se = np.sqrt(p * (1 - p) / reps)
    return BacktrackTail(k_grid, p, se, reps, n)


def _backtrack_batch(spec, reps, seed, rep_offset, levels, top, n, step_cap):
    rep_ids = np.arange(rep_offset, rep_offset + reps, dtype=np.uint64)
    eng = _Ensemble(spec, rep_ids, env_seed=seed, coin_seed=~seed & ((1 << 64) - 1))
    n_levels = len(levels)
    started = np.zeros((reps, n_levels), dtype=bool)
    dipped = np.zeros((reps, n_levels), dtype=bool)
    ptr = np.zeros(reps, dtype=np.int64)
    active = np.ones(reps, dtype=bool)
    t = 0
    while np.any(active) and t < step_cap:
        act = np.flatnonzero(active)
        eng.step(act)
        t += 1
        x = eng.X[act]
        movable = ptr[act] < n_levels
        if np.any(movable):
            sub = act[movable]
            hit = eng.X[sub] == levels[ptr[sub]]
            rows = sub[hit]
            started[rows, ptr[rows]] = True
            ptr[rows] += 1
        low = x <= n
        if np.any(low):
            rows = act[low]
            dipped[rows] |= started[rows]
        finished = act[x >= top]
        active[finished] = False
    return dipped
