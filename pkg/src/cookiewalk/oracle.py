"""Exact finite computations used as ground truth for Monte Carlo.

Both branching-step laws have the same shape: a short biased prefix (one coin
per cookie) followed by a fair negative-binomial tail.  Everything here is
computed from that decomposition: single-step PMFs, whole step matrices,
truncated (level, stack-state) chain matrices with an explicit overflow
super-state, exact survival curves, exact one-step laws of the anchor-observed
chains, and the drift/variance ratio used by the recurrence criterion.

Truncation is never renormalized away: every result carries the leaked mass
so the truncation error stays auditable end-to-end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import nbinom

from .environment import CookieStack, StackChainSpec
from .errors import CapTooSmall, SolveFailure

DENSE_SOLVE_MAX_UNKNOWNS = 6000
NEUMANN_RESIDUAL = 1e-14
NEUMANN_CAP = 200_000
MATRIX_CELL_BUDGET = 3 * 10 ** 8  # float64 cells across one builder call


# ---------------------------------------------------------------------------
# fair-coin negative binomial pieces
# ---------------------------------------------------------------------------

def _negbin_row(r: int, cap: int) -> np.ndarray:
    """pmf of the fair negative binomial with r required stops, on 0..cap.

    For fair coins the count of successes before the r-th failure and the
    count of failures before the r-th success have the same law:
    pmf(m) = C(m+r-1, m) 2^-(m+r).  r = 0 is a point mass at 0.
    """
    if r == 0:
        out = np.zeros(cap + 1)
        out[0] = 1.0
        return out
    m = np.arange(cap + 1)
    logp = gammaln(m + r) - gammaln(m + 1) - gammaln(r) - (m + r) * np.log(2.0)
    return np.exp(logp)


def _negbin_sf(r: np.ndarray, m: np.ndarray) -> np.ndarray:
    """P(NB_r > m), elementwise, with the r = 0 convention handled."""
    r = np.asarray(r)
    m = np.asarray(m)
    out = np.zeros(np.broadcast(r, m).shape)
    mask = r > 0
    if np.any(mask):
        rr = np.broadcast_to(r, out.shape)[mask]
        mm = np.broadcast_to(m, out.shape)[mask]
        out[mask] = nbinom.sf(mm, rr, 0.5)
    return out


def _negbin_grid(r_max: int, cap: int) -> np.ndarray:
    """Rows r = 0..r_max of the fair negative binomial pmf on 0..cap."""
    m = np.arange(cap + 1, dtype=float)
    r = np.arange(r_max + 1, dtype=float)
    logp = (
        gammaln(m[None, :] + r[:, None])
        - gammaln(m[None, :] + 1.0)
        - gammaln(np.maximum(r, 1.0))[:, None]
        - (m[None, :] + r[:, None]) * np.log(2.0)
    )
    grid = np.exp(logp)
    grid[0, :] = 0.0
    grid[0, 0] = 1.0
    return grid


# ---------------------------------------------------------------------------
# biased prefix
# ---------------------------------------------------------------------------

def _prefix_dp(probs: tuple[float, ...], target: int, stop_on_success: bool):
    """Consume the biased prefix, stopping early when the stop-counter hits target.

    Forward steps (stop_on_success=False) stop on failures and count
    successes; backward steps (stop_on_success=True) stop on successes and
    count failures.  Returns (stopped, alive): ``stopped[c]`` is the mass that
    reached the target within the prefix with output count c; ``alive[a, c]``
    is the mass still needing ``target - a`` stops after the full prefix, with
    output count c so far.
    """
    m_len = len(probs)
    alive = np.zeros((m_len + 1, m_len + 1))
    alive[0, 0] = 1.0
    stopped = np.zeros(m_len + 1)
    for i in range(m_len):
        p = probs[i]
        p_stop = p if stop_on_success else 1.0 - p
        nxt = np.zeros_like(alive)
        hit = alive * p_stop            # stop-counter advances
        nxt[1:, :] += hit[:-1, :]
        nxt[:, 1:] += (alive * (1.0 - p_stop))[:, :-1]  # output counter advances
        if target <= m_len:
            stopped += nxt[target, :]
            nxt[target, :] = 0.0
        alive = nxt
    return stopped, alive


def _step_pmf(level: int, stack: CookieStack, cap: int, backward: bool):
    if cap < 0:
        raise ValueError("cap must be >= 0")
    target = level + 1 if backward else level
    out = np.zeros(cap + 1)
    if target == 0:  # forward step from level 0: absorbing
        out[0] = 1.0
        return out, 0.0
    stopped, alive = _prefix_dp(stack.probs, target, stop_on_success=backward)
    upto = min(len(stopped) - 1, cap)
    out[: upto + 1] += stopped[: upto + 1]
    tail = float(stopped[cap + 1:].sum())
    for a in range(alive.shape[0]):
        remaining = target - a
        if remaining <= 0:
            continue
        for c in range(alive.shape[1]):
            w = alive[a, c]
            if w == 0.0:
                continue
            if c > cap:
                tail += w
                continue
            row = _negbin_row(remaining, cap - c)
            out[c:] += w * row
            tail += w * float(_negbin_sf(np.array(remaining), np.array(cap - c)))
    return out, tail


def forward_step_pmf(u: int, stack: CookieStack, cap: int) -> tuple[np.ndarray, float]:
    """Exact law of one forward branching step from level u under the stack.

    The step counts successes before the u-th failure in the stack's coin
    sequence.  Returns (pmf over 0..cap, tail mass beyond cap); the two sum
    to 1 within 1e-12.  Level 0 is absorbing.
    """
    if u < 0:
        raise ValueError("level must be >= 0")
    return _step_pmf(u, stack, cap, backward=False)


def backward_step_pmf(v: int, stack: CookieStack, cap: int) -> tuple[np.ndarray, float]:
    """Exact law of one backward branching step from level v under the stack.

    The step counts failures before the (v+1)-th success, so level 0 is not
    absorbing.  Returns (pmf over 0..cap, tail mass beyond cap).
    """
    if v < 0:
        raise ValueError("level must be >= 0")
    return _step_pmf(v, stack, cap, backward=True)


# ---------------------------------------------------------------------------
# whole step matrices
# ---------------------------------------------------------------------------

def _prefix_count_law(probs: tuple[float, ...], count_success: bool) -> np.ndarray:
    """Law of the success (or failure) count across the full biased prefix."""
    law = np.array([1.0])
    for p in probs:
        w = p if count_success else 1.0 - p
        nxt = np.zeros(len(law) + 1)
        nxt[1:] += law * w
        nxt[:-1] += law * (1.0 - w)
        law = nxt
    return law


def step_matrix(stack: CookieStack, level_cap: int, backward: bool, _grid: np.ndarray | None = None):
    """All one-step laws from levels 0..level_cap under one stack.

    Returns (P, overflow): P[x, y] = P(step from x lands on y <= level_cap),
    overflow[x] the mass beyond the cap.  Rows with level >= M share the
    full-prefix structure and are filled in one vectorized pass; small levels
    (where the step can end inside the prefix) use the exact DP.
    """
    m_len = stack.height
    L = level_cap
    if (L + 2) * (L + 1) > MATRIX_CELL_BUDGET:
        raise CapTooSmall(f"level cap {L} exceeds the matrix cell budget")
    P = np.zeros((L + 1, L + 1))
    overflow = np.zeros(L + 1)

    lo_rows = min(m_len, L + 1)  # rows 0..m_len-1 via DP (plus forward u=0)
    for x in range(lo_rows):
        P[x], overflow[x] = _step_pmf(x, stack, L, backward)
    if L < m_len:
        return P, overflow

    # fast path for levels >= M: full prefix always consumed
    grid = _negbin_grid(L + 2, L) if _grid is None else _grid
    count_law = _prefix_count_law(stack.probs, count_success=not backward)
    levels = np.arange(m_len, L + 1)
    for k, w in enumerate(count_law):  # k = output-counter value after prefix
        if w == 0.0:
            continue
        stops_done = m_len - k
        if backward:
            need = levels + 1 - stops_done   # successes still required
        else:
            need = levels - stops_done       # failures still required
        P[m_len:, k:] += w * grid[need, : L + 1 - k]
        overflow[m_len:] += w * _negbin_sf(need, L - k)
    return P, overflow


def forward_step_matrix(stack: CookieStack, level_cap: int):
    return step_matrix(stack, level_cap, backward=False)


def backward_step_matrix(stack: CookieStack, level_cap: int):
    return step_matrix(stack, level_cap, backward=True)


# ---------------------------------------------------------------------------
# truncated (level, stack-state) chains
# ---------------------------------------------------------------------------

@dataclass
class TruncatedChainMatrix:
    """Finite restriction of a (level, stack-state) chain with an overflow sink.

    One step moves the stack state by the chain kernel and then the level by
    the destination state's step law:
    p[(x, r) -> (y, r')] = kernel[r, r'] * steps[r'][x, y].
    Mass that would exceed the level cap goes to the overflow super-state and
    is reported, never renormalized away.
    """

    spec: StackChainSpec
    kind: str                      # 'V' (reversed kernel) or 'U' (forward kernel)
    level_cap: int
    kernel: np.ndarray             # kernel actually used
    steps: list[np.ndarray]        # per destination state, (L+1) x (L+1)
    step_overflow: list[np.ndarray]

    @property
    def n_states(self) -> int:
        return self.spec.n_states

    def evolve(self, dist: np.ndarray) -> tuple[np.ndarray, float]:
        """One step of (state, level) mass; returns (new dist, mass leaked)."""
        mixed = self.kernel.T @ dist
        out = np.empty_like(dist)
        leaked = 0.0
        for r in range(self.n_states):
            out[r] = mixed[r] @ self.steps[r]
            leaked += float(mixed[r] @ self.step_overflow[r])
        return out, leaked

    def full_matrix(self) -> np.ndarray:
        """Dense matrix over states (r, x) row-major plus a final overflow row/col."""
        n, L1 = self.n_states, self.level_cap + 1
        size = n * L1 + 1
        full = np.zeros((size, size))
        for r in range(n):
            for rp in range(n):
                w = self.kernel[r, rp]
                if w == 0.0:
                    continue
                full[r * L1:(r + 1) * L1, rp * L1:(rp + 1) * L1] = w * self.steps[rp]
                full[r * L1:(r + 1) * L1, -1] += w * self.step_overflow[rp]
        full[-1, -1] = 1.0
        return full

    def row_sum_check(self) -> float:
        """Worst absolute deviation of any (row + overflow) sum from 1."""
        worst = 0.0
        for rp in range(self.n_states):
            s = self.steps[rp].sum(axis=1) + self.step_overflow[rp]
            worst = max(worst, float(np.max(np.abs(s - 1.0))))
        return worst


def build_chain_matrix(
    spec: StackChainSpec,
    level_cap: int,
    kind: str = "V",
    overflow_guard: float | None = None,
) -> TruncatedChainMatrix:
    """Assemble the truncated chain for the backward ('V') or forward ('U') process.

    With ``overflow_guard`` set, raises CapTooSmall when a single step from a
    level in the lower half of the cap can leak more than the guard; by
    default leakage is only tracked (downstream consumers budget their own
    truncation error).
    """
    if kind not in ("V", "U"):
        raise ValueError("kind must be 'V' or 'U'")
    if level_cap < spec.height:
        raise CapTooSmall(f"level cap {level_cap} below stack height {spec.height}")
    kernel = spec.kernel_reversed if kind == "V" else spec.kernel
    grid = _negbin_grid(level_cap + 2, level_cap) if level_cap >= spec.height else None
    steps, ovs = [], []
    for s in spec.states:
        P, ov = step_matrix(s, level_cap, backward=(kind == "V"), _grid=grid)
        steps.append(P)
        ovs.append(ov)
    mat = TruncatedChainMatrix(spec, kind, level_cap, kernel, steps, ovs)
    if overflow_guard is not None:
        half = level_cap // 2
        worst = max(float(ov[: half + 1].max()) for ov in ovs)
        if worst > overflow_guard:
            raise CapTooSmall(
                f"one-step overflow {worst:.3e} from levels <= {half} exceeds "
                f"{overflow_guard:.1e}; raise the level cap"
            )
    return mat


def build_vr_matrix(spec: StackChainSpec, level_cap: int, **kw) -> TruncatedChainMatrix:
    """Truncated backward (level, stack-state) chain; see build_chain_matrix."""
    return build_chain_matrix(spec, level_cap, kind="V", **kw)


@dataclass
class SurvivalCurve:
    t: np.ndarray
    survival: np.ndarray
    error_bound: np.ndarray  # cumulative overflow mass; survival is exact within it

    def __iter__(self):  # convenience: t, survival pairs
        return iter(zip(self.t, self.survival))


def exact_survival_tail(
    matrix: TruncatedChainMatrix,
    t_max: int,
    start_level: int = 0,
    error_cap: float = 1e-6,
) -> SurvivalCurve:
    """Exact P(first joint return to (level 0, anchor) happens after t).

    The chain starts at (start_level, anchor); absorption is checked from
    step 1 on.  Survival counts overflowed mass as surviving, so the true
    value lies within ``error_bound`` below the reported one.
    """
    spec = matrix.spec
    dist = np.zeros((matrix.n_states, matrix.level_cap + 1))
    dist[spec.anchor, start_level] = 1.0
    surv = np.empty(t_max + 1)
    err = np.empty(t_max + 1)
    surv[0], err[0] = 1.0, 0.0
    absorbed = 0.0
    leaked_cum = 0.0
    for t in range(1, t_max + 1):
        dist, leaked = matrix.evolve(dist)
        leaked_cum += leaked
        absorbed += float(dist[spec.anchor, 0])
        dist[spec.anchor, 0] = 0.0
        surv[t] = 1.0 - absorbed
        err[t] = leaked_cum
        if leaked_cum > error_cap:
            raise CapTooSmall(
                f"overflow {leaked_cum:.3e} exceeded {error_cap:.1e} by step {t}"
            )
    return SurvivalCurve(np.arange(t_max + 1), surv, err)


# ---------------------------------------------------------------------------
# anchor-observed (hatted) chains
# ---------------------------------------------------------------------------

@dataclass
class HattedTransition:
    """One-step law of a branching process observed at anchor return times."""

    start_level: int
    kind: str
    level_cap: int
    pmf: np.ndarray        # over levels 0..level_cap; sums to 1 - overflow
    overflow: float

    def moments(self) -> tuple[float, float]:
        y = np.arange(len(self.pmf), dtype=float)
        mean_shift = float(self.pmf @ (y - self.start_level))
        second = float(self.pmf @ (y - self.start_level) ** 2)
        return mean_shift, second


def exact_hatted_transition(
    z: int,
    spec: StackChainSpec,
    level_cap: int,
    kind: str = "V",
    matrix: TruncatedChainMatrix | None = None,
) -> HattedTransition:
    """Distribution of the chain's level at the first anchor return, from level z.

    Computed as the absorption law of the truncated (level, state) chain with
    every anchor-state cell absorbing after step one: a direct dense linear
    solve when the non-anchor block is small, otherwise a monotone fixed-point
    accumulation with residual below 1e-14.
    """
    if matrix is None:
        matrix = build_chain_matrix(spec, level_cap, kind=kind, overflow_guard=None)
    if z > matrix.level_cap:
        raise CapTooSmall(f"start level {z} above cap {matrix.level_cap}")
    n, L1 = matrix.n_states, matrix.level_cap + 1
    anchor = spec.anchor
    others = [r for r in range(n) if r != anchor]

    # first step from (z, anchor)
    absorbed = matrix.kernel[anchor, anchor] * matrix.steps[anchor][z].copy()
    overflow = float(matrix.kernel[anchor, anchor] * matrix.step_overflow[anchor][z])
    alive = np.zeros((len(others), L1))
    for i, r in enumerate(others):
        alive[i] = matrix.kernel[anchor, r] * matrix.steps[r][z]
        overflow += float(matrix.kernel[anchor, r] * matrix.step_overflow[r][z])

    if not others:
        return HattedTransition(z, kind, matrix.level_cap, absorbed, overflow)

    k_oo = matrix.kernel[np.ix_(others, others)]
    k_oa = matrix.kernel[np.array(others), anchor]

    unknowns = len(others) * L1
    if unknowns <= DENSE_SOLVE_MAX_UNKNOWNS:
        # occupation measure x solves x (I - Q) = alive_flat, blockwise Q
        q = np.zeros((unknowns, unknowns))
        for i, _ in enumerate(others):
            for j, rj in enumerate(others):
                w = k_oo[i, j]
                if w != 0.0:
                    q[i * L1:(i + 1) * L1, j * L1:(j + 1) * L1] = w * matrix.steps[rj]
        try:
            x = np.linalg.solve(np.eye(unknowns) - q.T, alive.reshape(-1))
        except np.linalg.LinAlgError as e:
            raise SolveFailure(str(e)) from e
        occ = x.reshape(len(others), L1)
        if np.min(occ) < -1e-9:
            raise SolveFailure("occupation measure came out negative")
        for i, _ in enumerate(others):
            absorbed += k_oa[i] * (occ[i] @ matrix.steps[anchor])
            overflow += float(k_oa[i] * (occ[i] @ matrix.step_overflow[anchor]))
        # overflow while wandering through non-anchor states
        for j, rj in enumerate(others):
            inflow = k_oo[:, j].T @ occ
            overflow += float(inflow @ matrix.step_overflow[rj])
    else:
        for _ in range(NEUMANN_CAP):
            mixed_a = k_oa @ alive
            absorbed += mixed_a @ matrix.steps[anchor]
            overflow += float(mixed_a @ matrix.step_overflow[anchor])
            nxt = np.zeros_like(alive)
            for j, rj in enumerate(others):
                mixed = k_oo[:, j] @ alive
                nxt[j] = mixed @ matrix.steps[rj]
                overflow += float(mixed @ matrix.step_overflow[rj])
            alive = nxt
            if float(alive.sum()) < NEUMANN_RESIDUAL:
                break
        else:
            raise SolveFailure("hatted-transition iteration did not converge")

    return HattedTransition(z, kind, matrix.level_cap, absorbed, overflow)


@dataclass
class ThetaResult:
    x: int
    rho: float     # mean one-step displacement of the hatted chain from x
    nu: float      # second moment of the displacement divided by x
    theta: float   # 2 rho / nu
    overflow: float
    level_cap: int


def default_level_cap(x: int, height: int) -> int:
    return max(4 * x, 50 * height)


def exact_theta(
    x: int,
    spec: StackChainSpec,
    level_cap: int | None = None,
    kind: str = "U",
    overflow_tol: float = 1e-8,
    max_doublings: int = 2,
) -> ThetaResult:
    """Exact (rho, nu, theta) of the anchor-observed chain at level x.

    rho(x) = E_x(Z_1 - x), nu(x) = E_x[(Z_1 - x)^2] / x, theta = 2 rho / nu.
    The level cap starts at max(4x, 50M) and doubles until the absorbed law
    leaks less than ``overflow_tol``.
    """
    if x < 1:
        raise ValueError("x must be >= 1")
    cap = level_cap if level_cap is not None else default_level_cap(x, spec.height)
    for _ in range(max_doublings + 1):
        trans = exact_hatted_transition(x, spec, cap, kind=kind)
        if trans.overflow <= overflow_tol:
            mean_shift, second = trans.moments()
            nu = second / x
            if nu <= 0:
                raise SolveFailure("degenerate hatted variance")
            return ThetaResult(x, mean_shift, nu, 2.0 * mean_shift / nu, trans.overflow, cap)
        cap *= 2
    raise CapTooSmall(
        f"overflow stayed above {overflow_tol:.1e} up to level cap {cap // 2}"
    )


# ---------------------------------------------------------------------------
# regression fixture export
# ---------------------------------------------------------------------------

def pmf_to_text(pmf: np.ndarray, tail: float) -> str:
    lines = [f"{v:.17g}" for v in pmf]
    lines.append(f"tail {tail:.17g}")
    return "\n".join(lines) + "\n"

def pmf_from_text(text: str) -> tuple[np.ndarray, float]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    tail = float(lines[-1].split()[1])
    return np.array([float(v) for v in lines[:-1]]), tail


def matrix_to_text(mat: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(mat)) + "\n"


def matrix_from_text(text: str) -> np.ndarray:
    rows = [[float(v) for v in ln.split()] for ln in text.strip().splitlines() if ln.strip()]
    return np.array(rows)
