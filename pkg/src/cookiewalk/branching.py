"""Forward and backward branching processes and their renewal structure.

One forward step from level u counts successes before the u-th failure in a
site's coin sequence (level 0 absorbs); one backward step from level v counts
failures before the (v+1)-th success (level 0 does not absorb).  Sampling is
exact: one Bernoulli per cookie, then a fair negative-binomial tail.

The module also provides the dominating chains (prefix forced to all
successes / all failures), exact pathwise coupling of the three, the chains
observed only at anchor returns of the stack sequence, and the decomposition
of the backward chain into i.i.d. renewal cycles behind the speed formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .environment import CookieStack, StackChainSpec
from .errors import PhaseGuard, StepCapExceeded

DEFAULT_CHAIN_STEP_CAP = 10 ** 7

CHAIN_KINDS = ("U", "V", "U+", "U-", "V+", "V-")


# ---------------------------------------------------------------------------
# exact one-step samplers
# ---------------------------------------------------------------------------

def _negbin(gen: np.random.Generator, counts: np.ndarray) -> np.ndarray:
    """Sum of `counts` i.i.d. fair geometric block lengths (vector-safe at 0)."""
    out = np.zeros(counts.shape, dtype=np.int64)
    mask = counts > 0
    if np.any(mask):
        out[mask] = gen.negative_binomial(counts[mask], 0.5)
    return out


def _steps_vector(
    levels: np.ndarray,
    probs: np.ndarray,
    gen: np.random.Generator,
    backward: bool,
) -> np.ndarray:
    """One exact branching step for each row; probs is (n, M) per-row cookie probs."""
    levels = np.asarray(levels, dtype=np.int64)
    n, m_len = probs.shape
    out = np.zeros(n, dtype=np.int64)
    act = np.ones(n, dtype=bool) if backward else levels > 0
    if not np.any(act):
        return out
    lv = levels[act]
    coins = gen.random((int(act.sum()), m_len)) < probs[act]
    target = lv + 1 if backward else lv
    stops = coins if backward else ~coins      # which coin outcome advances the stop counter
    cums = np.cumsum(stops, axis=1)
    stopped = cums[:, -1] >= target
    res = np.zeros(lv.shape, dtype=np.int64)
    if np.any(stopped):
        # first coin index (0-based) at which the stop counter reaches target
        pos = np.argmax(cums[stopped] >= target[stopped, None], axis=1)
        res[stopped] = pos + 1 - target[stopped]
    live = ~stopped
    if np.any(live):
        done = cums[live, -1]                  # stops seen in the prefix
        counted = m_len - done                 # output counter after the prefix
        res[live] = counted + _negbin(gen, target[live] - done)
    out[act] = res
    return out


def forward_step_sample(u: int, stack: CookieStack, gen: np.random.Generator) -> int:
    """Successes before the u-th failure under the stack's coin law; 0 absorbs."""
    probs = np.array(stack.probs)[None, :]
    return int(_steps_vector(np.array([u]), probs, gen, backward=False)[0])


def backward_step_sample(v: int, stack: CookieStack, gen: np.random.Generator) -> int:
    """Failures before the (v+1)-th success under the stack's coin law."""
    probs = np.array(stack.probs)[None, :]
    return int(_steps_vector(np.array([v]), probs, gen, backward=True)[0])


def _dominating_step(
    levels: np.ndarray, m_len: int, gen: np.random.Generator, kind: str
) -> np.ndarray:
    """One step of a dominating chain (independent of the stack sequence)."""
    levels = np.asarray(levels, dtype=np.int64)
    if kind.endswith("+"):
        return m_len + _negbin(gen, levels + 1)
    return _negbin(gen, np.maximum(levels - m_len, 0))


# ---------------------------------------------------------------------------
# chain runners
# ---------------------------------------------------------------------------

@dataclass
class BranchingPath:
    kind: str
    levels: np.ndarray                 # (k_max + 1,) or (episodes, k_max + 1)
    states: np.ndarray | None = None   # stack-state index per step, if stack-driven
    truncated: bool = False


def _init_states(spec: StackChainSpec, init_state, episodes: int, gen) -> np.ndarray:
    if init_state == "anchor":
        return np.full(episodes, spec.anchor, dtype=np.int64)
    if init_state == "stationary":
        cum = np.cumsum(spec.stationary)
        return np.searchsorted(cum, gen.random(episodes), side="right").astype(np.int64)
    return np.full(episodes, int(init_state), dtype=np.int64)


def _advance_states(kernel_cum: np.ndarray, states: np.ndarray, gen) -> np.ndarray:
    u = gen.random(states.shape[0])
    return (u[:, None] >= kernel_cum[states]).sum(axis=1).astype(np.int64)


def run_chain(
    spec: StackChainSpec,
    kind: str,
    start: int,
    k_max: int,
    seed: int,
    init_state: str | int = "anchor",
    episodes: int = 1,
) -> BranchingPath:
    """Run a branching chain for k_max steps.

    'U'/'V' follow the stack sequence (forward kernel for 'U', reversed kernel
    for 'V'; each level step uses the newly entered state's stack).  The
    dominating kinds 'U+', 'U-', 'V+', 'V-' are stack-independent.  With
    episodes > 1 all paths are returned as rows.
    """
    if kind not in CHAIN_KINDS:
        raise ValueError(f"kind must be one of {CHAIN_KINDS}")
    gen = rng.generator(seed)
    m_len = spec.height
    levels = np.empty((episodes, k_max + 1), dtype=np.int64)
    levels[:, 0] = start
    if len(kind) == 2:  # dominating chains
        for k in range(k_max):
            levels[:, k + 1] = _dominating_step(levels[:, k], m_len, gen, kind)
        out = BranchingPath(kind, levels if episodes > 1 else levels[0])
        return out
    kernel = spec.kernel if kind == "U" else spec.kernel_reversed
    kernel_cum = np.cumsum(kernel, axis=1)
    table = spec.stack_probs_table()[:, :m_len]
    states = np.empty((episodes, k_max + 1), dtype=np.int64)
    states[:, 0] = _init_states(spec, init_state, episodes, gen)
    for k in range(k_max):
        states[:, k + 1] = _advance_states(kernel_cum, states[:, k], gen)
        levels[:, k + 1] = _steps_vector(
            levels[:, k], table[states[:, k + 1]], gen, backward=(kind == "V")
        )
    if episodes == 1:
        return BranchingPath(kind, levels[0], states[0])
    return BranchingPath(kind, levels, states)


@dataclass
class CoupledTriple:
    """Pathwise-coupled (lower, actual, upper) chains built from shared coins."""

    kind: str                # 'U' or 'V'
    lower: np.ndarray        # (episodes, k_max + 1)
    mid: np.ndarray
    upper: np.ndarray
    states: np.ndarray

    def domination_holds(self) -> bool:
        return bool(np.all(self.lower <= self.mid) and np.all(self.mid <= self.upper))


def run_coupled_triple(
    spec: StackChainSpec,
    kind: str,
    start: int,
    k_max: int,
    episodes: int,
    seed: int,
    init_state: str | int = "anchor",
) -> CoupledTriple:
    """Simulate (lower, actual, upper) from the same coins, started at one level.

    The three chains read the same site coin sequence: the actual chain uses
    the biased prefix as is, the upper chain pretends the prefix went entirely
    its way, the lower chain entirely against it.  The fair tail is shared
    through its block decomposition (block i = run length between consecutive
    stop outcomes), so partial block sums at the three chains' demands give an
    exact pathwise coupling and the sandwich holds surely, not just in law.
    """
    if kind not in ("U", "V"):
        raise ValueError("coupled triple kind must be 'U' or 'V'")
    backward = kind == "V"
    gen = rng.generator(seed)
    m_len = spec.height
    kernel = spec.kernel if kind == "U" else spec.kernel_reversed
    kernel_cum = np.cumsum(kernel, axis=1)
    table = spec.stack_probs_table()[:, :m_len]

    shape = (episodes, k_max + 1)
    low = np.empty(shape, dtype=np.int64)
    mid = np.empty(shape, dtype=np.int64)
    up = np.empty(shape, dtype=np.int64)
    low[:, 0] = mid[:, 0] = up[:, 0] = start
    states = np.empty(shape, dtype=np.int64)
    states[:, 0] = _init_states(spec, init_state, episodes, gen)

    for k in range(k_max):
        states[:, k + 1] = _advance_states(kernel_cum, states[:, k], gen)
        probs = table[states[:, k + 1]]
        coins = gen.random((episodes, m_len)) < probs
        stops = coins if backward else ~coins
        cums = np.cumsum(stops, axis=1)
        prefix_stops = cums[:, -1]
        prefix_counted = m_len - prefix_stops

        if backward:
            mid_target = mid[:, k] + 1
            low_blocks = np.maximum(low[:, k] - m_len, 0)
            up_blocks = up[:, k] + 1
        else:
            mid_target = mid[:, k].copy()
            low_blocks = np.maximum(low[:, k] - m_len, 0)
            up_blocks = up[:, k] + 1

        stopped = (prefix_stops >= mid_target) | (mid_target == 0)
        mid_val = np.zeros(episodes, dtype=np.int64)
        if np.any(stopped):
            tgt = mid_target[stopped]
            hit = np.zeros(stopped.sum(), dtype=np.int64)
            pos_rows = tgt > 0
            if np.any(pos_rows):
                pos = np.argmax(cums[stopped][pos_rows] >= tgt[pos_rows, None], axis=1)
                hit[pos_rows] = pos + 1 - tgt[pos_rows]
            mid_val[stopped] = hit
        mid_blocks = np.where(stopped, 0, mid_target - prefix_stops)

        # shared fair tail: partial block sums at the three (sorted) demands
        a = low_blocks
        b = np.maximum(mid_blocks, a)   # stopped rows consume no blocks; keep order
        c = np.maximum(up_blocks, b)
        s_a = _negbin(gen, a)
        s_b = s_a + _negbin(gen, b - a)
        s_c = s_b + _negbin(gen, c - b)

        low[:, k + 1] = s_a
        live = ~stopped
        mid_val[live] = prefix_counted[live] + s_b[live]
        mid[:, k + 1] = mid_val
        up[:, k + 1] = m_len + s_c
    return CoupledTriple(kind, low, mid, up, states)


# ---------------------------------------------------------------------------
# chains read off an explicit coin field
# ---------------------------------------------------------------------------

def forward_chain_from_coins(coins, u0: int, k_max: int) -> BranchingPath:
    """Forward chain computed by scanning an explicit coin field site by site.

    ``coins`` is any object with outcome(site, visit) -> {0,1}.  Site k+1's
    coins are consumed in visit order until the current level's worth of
    failures has been seen; sharing the field with a walk reproduces the
    coupling between the walk's per-site up-crossings and this chain.
    """
    levels = np.zeros(k_max + 1, dtype=np.int64)
    levels[0] = u0
    for k in range(k_max):
        target = int(levels[k])
        if target == 0:
            break  # absorbing; the array tail stays 0
        site = k + 1
        fails = 0
        succ = 0
        visit = 0
        while fails < target:
            visit += 1
            if coins.outcome(site, visit):
                succ += 1
            else:
                fails += 1
        levels[k + 1] = succ
    return BranchingPath("U", levels)


# ---------------------------------------------------------------------------
# anchor-observed chains
# ---------------------------------------------------------------------------

@dataclass
class AnchorReturn:
    """Return times of the stack chain to the anchor state."""

    anchor: int
    times: np.ndarray
    mean_return_exact: float

    @property
    def mean_return_estimate(self) -> float:
        gaps = np.diff(np.concatenate(([0], self.times)))
        return float(gaps.mean())


def anchor_return_times(spec: StackChainSpec, n_returns: int, seed: int) -> AnchorReturn:
    """Sample successive return times to the anchor, starting from the anchor."""
    gen = rng.generator(seed)
    kernel_cum = np.cumsum(spec.kernel, axis=1)
    state = spec.anchor
    times = []
    t = 0
    while len(times) < n_returns:
        t += 1
        state = int(np.searchsorted(kernel_cum[state], gen.random(), side="right"))
        if state == spec.anchor:
            times.append(t)
    return AnchorReturn(spec.anchor, np.array(times), spec.mean_return_time)


@dataclass
class HattedSamples:
    kind: str
    start: int
    values: np.ndarray      # (episodes, n_returns) level at successive anchor returns
    truncated: np.ndarray   # episodes that hit the step cap


def run_hatted(
    kind: str,
    spec: StackChainSpec,
    start: int,
    episodes: int,
    seed: int,
    n_returns: int = 1,
    step_cap: int = DEFAULT_CHAIN_STEP_CAP,
) -> HattedSamples:
    """Values of the U or V chain at successive anchor-return times of its stacks.

    Starts at (level=start, state=anchor).  Each emitted column is the chain
    level the next time the stack sequence revisits the anchor; the sequence
    of emitted values is a Markov chain even though the underlying levels are
    not.
    """
    if kind not in ("U", "V"):
        raise ValueError("kind must be 'U' or 'V'")
    gen = rng.generator(seed)
    kernel = spec.kernel if kind == "U" else spec.kernel_reversed
    kernel_cum = np.cumsum(kernel, axis=1)
    table = spec.stack_probs_table()[:, : spec.height]
    levels = np.full(episodes, start, dtype=np.int64)
    states = np.full(episodes, spec.anchor, dtype=np.int64)
    emitted = np.zeros((episodes, n_returns), dtype=np.int64)
    col = np.zeros(episodes, dtype=np.int64)
    active = np.ones(episodes, dtype=bool)
    truncated = np.zeros(episodes, dtype=bool)
    steps = 0
    while np.any(active):
        steps += 1
        if steps > step_cap:
            truncated[active] = True
            break
        idx = np.flatnonzero(active)
        states[idx] = _advance_states(kernel_cum, states[idx], gen)
        levels[idx] = _steps_vector(levels[idx], table[states[idx]], gen, backward=(kind == "V"))
        hit = idx[states[idx] == spec.anchor]
        if hit.size:
            emitted[hit, col[hit]] = levels[hit]
            col[hit] += 1
            finished = hit[col[hit] >= n_returns]
            active[finished] = False
    return HattedSamples(kind, start, emitted, truncated)


@dataclass
class ReturnMoments:
    kind: str
    start: int
    reps: int
    mean: float
    mean_se: float
    var: float
    var_se: float
    mean_return_time: float  # exact from the kernel


def moments_at_return(
    x: int, spec: StackChainSpec, reps: int, seed: int, kind: str = "U"
) -> ReturnMoments:
    """Monte Carlo mean and variance of the chain at the first anchor return.

    The exact anchor mean-return time 1/pi(anchor) is attached so drift and
    variance laws (mean ~ x + drift * mu, variance ~ 2 x mu) can be checked
    without a second estimation layer.
    """
    samples = run_hatted(kind, spec, x, reps, seed, n_returns=1)
    vals = samples.values[:, 0].astype(float)
    mean = float(vals.mean())
    mean_se = float(vals.std(ddof=1) / np.sqrt(reps))
    var = float(vals.var(ddof=1))
    centered = (vals - mean) ** 2
    var_se = float(centered.std(ddof=1) / np.sqrt(reps))
    return ReturnMoments(kind, x, reps, mean, mean_se, var, var_se, spec.mean_return_time)


# ---------------------------------------------------------------------------
# renewal decomposition of the backward chain
# ---------------------------------------------------------------------------

@dataclass
class RenewalRecord:
    """Per-cycle gaps and areas of the backward chain between joint zeros.

    A renewal happens when the level hits 0 while the stack sequence sits at
    the anchor; cycles between successive renewals are i.i.d.  ``gaps[i]`` is
    the cycle length, ``areas[i]`` the summed level over the cycle.
    """

    gaps: np.ndarray
    areas: np.ndarray
    truncated: np.ndarray
    delta: float

    @property
    def n_cycles(self) -> int:
        return int(len(self.gaps))

    @property
    def truncated_fraction(self) -> float:
        return float(self.truncated.mean()) if len(self.truncated) else 0.0

    def mu_sigma(self) -> tuple[float, float]:
        ok = ~self.truncated
        g = self.gaps[ok].astype(float)
        return float(g.mean()), float(g.std(ddof=1) / np.sqrt(len(g)))

    def mu_q(self) -> tuple[float, float]:
        ok = ~self.truncated
        a = self.areas[ok].astype(float)
        return float(a.mean()), float(a.std(ddof=1) / np.sqrt(len(a)))

    def mu_q_trimmed(self, trim: float = 0.01) -> float:
        ok = ~self.truncated
        a = np.sort(self.areas[ok].astype(float))
        k = int(len(a) * (1.0 - trim))
        return float(a[:max(k, 1)].mean())

    @property
    def mu_q_divergent(self) -> bool:
        """Cauchy criterion on running means: unstable mean flags divergence."""
        ok = ~self.truncated
        a = self.areas[ok].astype(float)
        if len(a) < 100:
            return False
        marks = [len(a) // 4, len(a) // 2, len(a)]
        means = [a[:m].mean() for m in marks]
        rel = max(
            abs(means[i + 1] - means[i]) / max(abs(means[i + 1]), 1e-12)
            for i in range(len(means) - 1)
        )
        return rel > 0.1

    def velocity(self) -> float:
        """Speed through the renewal identity v = 1 / (1 + 2 mu_Q / mu_sigma)."""
        mq, _ = self.mu_q()
        ms, _ = self.mu_sigma()
        return 1.0 / (1.0 + 2.0 * mq / ms)


def renewal_decompose(
    spec: StackChainSpec,
    cycles: int,
    seed: int,
    step_cap: int = DEFAULT_CHAIN_STEP_CAP,
    batch: int = 20000,
) -> RenewalRecord:
    """Collect i.i.d. renewal cycles of the backward chain from the joint zero.

    Each cycle starts at (level 0, anchor) and runs to the next joint zero.
    Requires drift > 1: below that the cycle length has no finite mean and
    the step cap would dominate.
    """
    if spec.delta <= 1.0:
        raise PhaseGuard(f"renewal cycles need drift > 1, got {spec.delta:.4g}")
    gaps = np.empty(cycles, dtype=np.int64)
    areas = np.empty(cycles, dtype=np.int64)
    trunc = np.zeros(cycles, dtype=bool)
    done = 0
    block_idx = 0
    while done < cycles:
        n = min(batch, cycles - done)
        g, a, t = _renewal_batch(spec, n, rng.derive_seed(seed, block_idx), step_cap)
        gaps[done:done + n] = g
        areas[done:done + n] = a
        trunc[done:done + n] = t
        done += n
        block_idx += 1
    return RenewalRecord(gaps, areas, trunc, spec.delta)


def _renewal_batch(spec: StackChainSpec, episodes: int, seed: int, step_cap: int):
    gen = rng.generator(seed)
    kernel_cum = np.cumsum(spec.kernel_reversed, axis=1)
    table = spec.stack_probs_table()[:, : spec.height]
    levels = np.zeros(episodes, dtype=np.int64)
    states = np.full(episodes, spec.anchor, dtype=np.int64)
    gaps = np.zeros(episodes, dtype=np.int64)
    areas = np.zeros(episodes, dtype=np.int64)
    trunc = np.zeros(episodes, dtype=bool)
    active = np.ones(episodes, dtype=bool)
    t = 0
    while np.any(active):
        t += 1
        if t > step_cap:
            trunc[active] = True
            break
        idx = np.flatnonzero(active)
        states[idx] = _advance_states(kernel_cum, states[idx], gen)
        levels[idx] = _steps_vector(levels[idx], table[states[idx]], gen, backward=True)
        areas[idx] += levels[idx]
        gaps[idx] = t
        finished = idx[(levels[idx] == 0) & (states[idx] == spec.anchor)]
        active[finished] = False
    return gaps, areas, trunc


@dataclass
class SurvivalSamples:
    """Joint samples of the four survival quantities from one cycle each.

    Per episode, started at (level 0, anchor): the number of anchor returns
    until the observed chain first returns to 0 (``tau0_hat``), the summed
    observed levels over those returns (``area_hat``), the raw cycle length
    (``sigma0``) and raw cycle area (``area_raw``).
    """

    tau0_hat: np.ndarray
    area_hat: np.ndarray
    sigma0: np.ndarray
    area_raw: np.ndarray
    truncated: np.ndarray
    delta: float

    @property
    def truncated_fraction(self) -> float:
        return float(self.truncated.mean()) if len(self.truncated) else 0.0


def survival_statistics(
    spec: StackChainSpec,
    episodes: int,
    seed: int,
    step_cap: int = DEFAULT_CHAIN_STEP_CAP,
    batch: int = 20000,
) -> SurvivalSamples:
    """Sample the tail quantities whose exponents the drift predicts.

    The raw cycle quantities decay like x^-delta (length) and x^-(delta/2)
    (area); the anchor-observed quantities share the exponents with different
    constants.  Requires drift > 1.
    """
    if spec.delta <= 1.0:
        raise PhaseGuard(f"survival statistics need drift > 1, got {spec.delta:.4g}")
    th = np.empty(episodes, dtype=np.int64)
    ah = np.empty(episodes, dtype=np.int64)
    s0 = np.empty(episodes, dtype=np.int64)
    ar = np.empty(episodes, dtype=np.int64)
    trunc = np.zeros(episodes, dtype=bool)
    done = 0
    block = 0
    while done < episodes:
        n = min(batch, episodes - done)
        res = _survival_batch(spec, n, rng.derive_seed(seed, block), step_cap)
        th[done:done + n], ah[done:done + n], s0[done:done + n], ar[done:done + n], tr = res
        trunc[done:done + n] = tr
        done += n
        block += 1
    return SurvivalSamples(th, ah, s0, ar, trunc, spec.delta)


def _survival_batch(spec: StackChainSpec, episodes: int, seed: int, step_cap: int):
    gen = rng.generator(seed)
    kernel_cum = np.cumsum(spec.kernel_reversed, axis=1)
    table = spec.stack_probs_table()[:, : spec.height]
    levels = np.zeros(episodes, dtype=np.int64)
    states = np.full(episodes, spec.anchor, dtype=np.int64)
    tau_hat = np.zeros(episodes, dtype=np.int64)
    area_hat = np.zeros(episodes, dtype=np.int64)
    sigma0 = np.zeros(episodes, dtype=np.int64)
    area = np.zeros(episodes, dtype=np.int64)
    trunc = np.zeros(episodes, dtype=bool)
    active = np.ones(episodes, dtype=bool)
    t = 0
    while np.any(active):
        t += 1
        if t > step_cap:
            trunc[active] = True
            break
        idx = np.flatnonzero(active)
        states[idx] = _advance_states(kernel_cum, states[idx], gen)
        levels[idx] = _steps_vector(levels[idx], table[states[idx]], gen, backward=True)
        area[idx] += levels[idx]
        sigma0[idx] = t
        at_anchor = idx[states[idx] == spec.anchor]
        if at_anchor.size:
            tau_hat[at_anchor] += 1
            area_hat[at_anchor] += levels[at_anchor]
            finished = at_anchor[levels[at_anchor] == 0]
            active[finished] = False
    return tau_hat, area_hat, sigma0, area, trunc
