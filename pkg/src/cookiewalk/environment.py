"""Bounded elliptic Markovian cookie environments.

An environment is a bi-infinite sequence of cookie stacks, one per site,
generated by a finite-state Markov chain.  A stack is a vector of M
right-jump probabilities (one per visit; later visits are fair).  This module
holds the stack/chain types, validation, the stationary law, the per-site
drift parameter, spatial reversal, ergodicity diagnostics, seeded lazy
realizations, a library of named environments, and the JSON spec format.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .errors import (
    BadInitial,
    BadParams,
    NoConvergence,
    NonStochasticRow,
    NotElliptic,
    Periodic,
    Reducible,
    TwoSidedNonStationary,
    UnknownName,
)

KERNEL_ROW_TOL = 1e-12
STATIONARY_TOL = 1e-10
DENSE_SOLVE_MAX_STATES = 64
POWER_ITER_TOL = 1e-12
POWER_ITER_CAP = 10 ** 6


@dataclass(frozen=True)
class CookieStack:
    """Per-site visit-indexed right-jump probabilities.

    ``probs[i-1]`` is the chance of a rightward jump on the i-th visit; all
    visits beyond ``len(probs)`` are fair.  Entries must lie strictly inside
    (0, 1) (ellipticity).
    """

    probs: tuple[float, ...]

    def __post_init__(self):
        for i, p in enumerate(self.probs):
            if not (0.0 < p < 1.0):
                raise NotElliptic(f"stack entry {i + 1} is {p!r}, must be in (0,1)")

    @property
    def height(self) -> int:
        return len(self.probs)

    def prob(self, visit: int) -> float:
        """Right-jump probability on the given (1-based) visit."""
        if visit <= len(self.probs):
            return self.probs[visit - 1]
        return 0.5

    @property
    def drift(self) -> float:
        """Total expected displacement contributed by this stack: sum of 2p-1."""
        return float(sum(2.0 * p - 1.0 for p in self.probs))


def placebo_stack(height: int = 1) -> CookieStack:
    return CookieStack((0.5,) * height)


@dataclass(frozen=True)
class StackChainSpec:
    """A validated finite-state stack chain plus its derived quantities.

    Build instances through :func:`validate_spec` (or a builtin); the
    constructor does not re-derive anything.
    """

    states: tuple[CookieStack, ...]
    kernel: np.ndarray            # row-stochastic, states x states
    initial: np.ndarray           # law of the site-0 stack
    stationary: np.ndarray        # pi with pi = pi K
    kernel_reversed: np.ndarray   # K~(r,r') = K(r',r) pi(r') / pi(r)
    state_drifts: np.ndarray      # drift of each stack
    delta: float                  # sum_s pi(s) * drift(s)
    anchor: int                   # argmax pi, ties to lowest index
    name: str | None = None

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def height(self) -> int:
        return self.states[0].height

    @property
    def initial_is_stationary(self) -> bool:
        return bool(np.max(np.abs(self.initial - self.stationary)) <= STATIONARY_TOL)

    @property
    def mean_return_time(self) -> float:
        """Exact mean return time of the chain to the anchor state: 1/pi(anchor)."""
        return 1.0 / float(self.stationary[self.anchor])

    def stack_probs_table(self) -> np.ndarray:
        """(n_states, height+1) table: row s = stack probs then 0.5 for the fair tail."""
        table = np.full((self.n_states, self.height + 1), 0.5)
        for i, s in enumerate(self.states):
            table[i, : self.height] = s.probs
        return table

    def __repr__(self) -> str:  # compact: the full matrices are noisy
        label = f" {self.name!r}" if self.name else ""
        return (
            f"StackChainSpec({self.n_states} states, M={self.height}, "
            f"delta={self.delta:.6g}{label})"
        )


# ---------------------------------------------------------------------------
# validation and derived quantities
# ---------------------------------------------------------------------------

def _check_kernel_rows(kernel: np.ndarray) -> None:
    sums = kernel.sum(axis=1)
    for i, s in enumerate(sums):
        if abs(s - 1.0) > KERNEL_ROW_TOL:
            raise NonStochasticRow(i, float(s))
    if np.any(kernel < 0.0):
        i = int(np.argwhere(kernel < 0)[0][0])
        raise NonStochasticRow(i, float(kernel[i].sum()))


def _check_irreducible_aperiodic(kernel: np.ndarray) -> None:
    """Graph reachability on the support plus gcd of cycle lengths through state 0."""
    n = kernel.shape[0]
    support = kernel > 0.0

    def reachable(start: int) -> np.ndarray:
        seen = np.zeros(n, dtype=bool)
        seen[start] = True
        frontier = [start]
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.flatnonzero(support[u]):
                    if not seen[v]:
                        seen[v] = True
                        nxt.append(int(v))
            frontier = nxt
        return seen

    if not reachable(0).all():
        raise Reducible("not all states reachable from state 0")
    # reverse reachability: everything must also reach state 0
    if not reachable_t(support):
        raise Reducible("state 0 not reachable from all states")

    # period = gcd of lengths of all cycles through state 0; BFS layers suffice
    dist = np.full(n, -1, dtype=np.int64)
    dist[0] = 0
    frontier = [0]
    g = 0
    d = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(support[u]):
                if dist[v] < 0:
                    dist[v] = d + 1
                    nxt.append(int(v))
                else:
                    g = math.gcd(g, d + 1 - int(dist[v]))
        frontier = nxt
        d += 1
    if g != 1:
        raise Periodic(f"kernel has period {g}")


def reachable_t(support: np.ndarray) -> bool:
    n = support.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(support[:, u]):
                if not seen[v]:
                    seen[v] = True
                    nxt.append(int(v))
        frontier = nxt
    return bool(seen.all())


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    """Solve pi = pi K for an irreducible, aperiodic, row-stochastic kernel.

    Small chains use state-elimination (Grassmann-Taksar-Heyman): it involves
    no subtractions, so every entry comes out with full relative accuracy even
    when the stationary mass spans many orders of magnitude (age chains).
    Larger chains fall back to power iteration.
    """
    kernel = np.asarray(kernel, dtype=float)
    n = kernel.shape[0]
    if n == 1:
        return np.ones(1)
    if n <= DENSE_SOLVE_MAX_STATES:
        p = kernel.copy()
        for k in range(n - 1, 0, -1):
            s = p[k, :k].sum()
            p[:k, k] /= s
            p[:k, :k] += np.outer(p[:k, k], p[k, :k])
        pi = np.zeros(n)
        pi[0] = 1.0
        for k in range(1, n):
            pi[k] = pi[:k] @ p[:k, k]
        pi = pi / pi.sum()
    else:
        pi = np.full(n, 1.0 / n)
        for _ in range(POWER_ITER_CAP):
            nxt = pi @ kernel
            if np.max(np.abs(nxt - pi)) < POWER_ITER_TOL:
                pi = nxt
                break
            pi = nxt
        else:
            raise NoConvergence("power iteration did not reach tolerance")
        pi = pi / pi.sum()
    if np.max(np.abs(pi @ kernel - pi)) > STATIONARY_TOL or np.any(pi <= 0):
        raise NoConvergence("stationary solve failed residual or positivity check")
    return pi


def reversed_kernel(kernel: np.ndarray, pi: np.ndarray) -> np.ndarray:
    ktilde = kernel.T * pi[None, :] / pi[:, None]
    rs = ktilde.sum(axis=1)
    if np.max(np.abs(rs - 1.0)) > STATIONARY_TOL:
        raise NoConvergence("reversed kernel rows failed stochasticity check")
    return ktilde


def validate_spec(
    states: Sequence[CookieStack] | Sequence[Sequence[float]],
    kernel: np.ndarray,
    initial: np.ndarray | str = "stationary",
    name: str | None = None,
) -> StackChainSpec:
    """Validate raw (states, kernel, initial) and populate derived fields.

    Checks: equal stack heights, ellipticity (via CookieStack), row-stochastic
    kernel to 1e-12, irreducibility and aperiodicity of the support graph,
    initial law a distribution.  Derives the stationary law, the reversed
    kernel, per-state drifts, the drift parameter, and the anchor state.
    """
    stacks = tuple(
        s if isinstance(s, CookieStack) else CookieStack(tuple(float(p) for p in s))
        for s in states
    )
    if not stacks:
        raise BadParams("at least one state required")
    heights = {s.height for s in stacks}
    if len(heights) != 1:
        raise NotElliptic(f"stacks have unequal heights {sorted(heights)}")

    kernel = np.array(kernel, dtype=float)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] != len(stacks):
        raise BadParams(f"kernel shape {kernel.shape} does not match {len(stacks)} states")
    _check_kernel_rows(kernel)
    _check_irreducible_aperiodic(kernel)

    pi = stationary_distribution(kernel)

    if isinstance(initial, str):
        if initial != "stationary":
            raise BadInitial(f"unknown initial spec {initial!r}")
        phi = pi.copy()
    else:
        phi = np.array(initial, dtype=float)
        if phi.shape != (len(stacks),) or np.any(phi < 0) or abs(phi.sum() - 1.0) > 1e-12:
            raise BadInitial("initial law is not a probability vector over the states")

    drifts = np.array([s.drift for s in stacks])
    delta = float(pi @ drifts)
    anchor = int(np.argmax(pi))  # argmax takes the lowest index on ties

    return StackChainSpec(
        states=stacks,
        kernel=kernel,
        initial=phi,
        stationary=pi,
        kernel_reversed=reversed_kernel(kernel, pi),
        state_drifts=drifts,
        delta=delta,
        anchor=anchor,
        name=name,
    )


def compute_delta(spec: StackChainSpec) -> tuple[float, np.ndarray]:
    """Drift parameter and per-state drifts: delta = sum_s pi(s) sum_i (2 s(i) - 1)."""
    return spec.delta, spec.state_drifts.copy()


def reverse_environment(spec: StackChainSpec) -> StackChainSpec:
    """Spatially reversed environment: stacks flipped to 1 - s(i), kernel reversed.

    The reversed walk jumps right where the original jumps left, so the
    reversed drift is the negative of the original (tested, not assumed).
    """
    flipped = [tuple(1.0 - p for p in s.probs) for s in spec.states]
    return validate_spec(
        flipped,
        spec.kernel_reversed,
        "stationary",
        name=None if spec.name is None else f"{spec.name}:reversed",
    )


def uniform_ergodicity_diagnostic(kernel: np.ndarray, n_max: int) -> np.ndarray:
    """sup-TV distance of the n-step law from stationarity, n = 1..n_max.

    d(n) = max_s (1/2) || K^n(s,.) - pi ||_1.  Nonincreasing in n; a slow
    decay flags a nearly reducible kernel but is not an error.
    """
    kernel = np.asarray(kernel, dtype=float)
    pi = stationary_distribution(kernel)
    out = np.empty(n_max)
    kn = kernel.copy()
    for n in range(n_max):
        out[n] = 0.5 * np.max(np.abs(kn - pi[None, :]).sum(axis=1))
        if n + 1 < n_max:
            kn = kn @ kernel
    return out


# ---------------------------------------------------------------------------
# seeded realizations
# ---------------------------------------------------------------------------

class EnvironmentRealization:
    """Deterministic lazy site -> stack-state assignment.

    Site 0 is drawn from the initial law; sites k > 0 extend with the kernel,
    sites k < 0 extend with the reversed kernel.  Each site's uniform is
    keyed by (seed, site), so the assignment is independent of query order
    and identical on re-query.  In strict mode negative sites require the
    initial law to be stationary (the two-sided law is otherwise not
    determined by the forward kernel alone).
    """

    def __init__(self, spec: StackChainSpec, seed: int, strict: bool = True):
        self.spec = spec
        self.seed = int(seed)
        self.strict = bool(strict)
        self._lock = threading.Lock()
        self._fwd_cum = np.cumsum(spec.kernel, axis=1)
        self._bwd_cum = np.cumsum(spec.kernel_reversed, axis=1)
        self._init_cum = np.cumsum(spec.initial)
        # state indices for sites 0..len-1 and -1..-len
        self._forward: list[int] = []
        self._backward: list[int] = []

    def _draw(self, cum: np.ndarray, u: float) -> int:
        return int(np.searchsorted(cum, u, side="right"))

    def _extend_forward(self, site: int) -> None:
        while len(self._forward) <= site:
            k = len(self._forward)
            u = rng.env_uniform(self.seed, k)
            if k == 0:
                self._forward.append(self._draw(self._init_cum, u))
            else:
                prev = self._forward[k - 1]
                self._forward.append(self._draw(self._fwd_cum[prev], u))

    def state_index(self, site: int) -> int:
        with self._lock:
            if site >= 0:
                self._extend_forward(site)
                return self._forward[site]
            if self.strict and not self.spec.initial_is_stationary:
                raise TwoSidedNonStationary(
                    "negative site requested with a non-stationary initial law; "
                    "construct with strict=False to sample backwards anyway"
                )
            self._extend_forward(0)
            while len(self._backward) < -site:
                k = -len(self._backward) - 1  # next negative site to fill
                u = rng.env_uniform(self.seed, k)
                prev = self._backward[-1] if self._backward else self._forward[0]
                self._backward.append(self._draw(self._bwd_cum[prev], u))
            return self._backward[-site - 1]

    def stack_at(self, site: int) -> CookieStack:
        return self.spec.states[self.state_index(site)]

    def prob(self, site: int, visit: int) -> float:
        """Right-jump probability at (site, visit); 1/2 beyond the stack height."""
        if visit > self.spec.height:
            return 0.5
        return self.stack_at(site).prob(visit)


def realize_environment(spec: StackChainSpec, seed: int, strict: bool = True) -> EnvironmentRealization:
    return EnvironmentRealization(spec, seed, strict=strict)


# ---------------------------------------------------------------------------
# builtin environments
# ---------------------------------------------------------------------------

def _builtin_placebo(params: dict) -> StackChainSpec:
    m = int(params.get("M", 1))
    return validate_spec([placebo_stack(m)], np.array([[1.0]]), "stationary", name="placebo")


def _builtin_iid_product(params: dict) -> StackChainSpec:
    """An (IID) environment: every kernel row equals the site law phi."""
    if "states" not in params or "phi" not in params:
        raise BadParams("iid_product requires 'states' and 'phi'")
    states = params["states"]
    phi = np.array(params["phi"], dtype=float)
    if phi.ndim != 1 or len(phi) != len(states):
        raise BadParams("phi length must match number of states")
    if np.any(phi <= 0) or abs(phi.sum() - 1.0) > 1e-12:
        raise BadParams("phi must be a strictly positive probability vector")
    kernel = np.tile(phi, (len(states), 1))
    return validate_spec(states, kernel, phi, name="iid_product")


def _builtin_two_state(params: dict) -> StackChainSpec:
    probs_a = tuple(params.get("probs_a", (0.9, 0.9)))
    probs_b = tuple(params.get("probs_b", (0.2, 0.2)))
    p_ab = float(params.get("p_ab", 0.5))
    p_ba = float(params.get("p_ba", 0.5))
    if not (0.0 < p_ab <= 1.0 and 0.0 < p_ba <= 1.0):
        raise BadParams("switch probabilities must be in (0,1]")
    if p_ab == 1.0 and p_ba == 1.0:
        raise BadParams("deterministic alternation is periodic")
    kernel = np.array([[1.0 - p_ab, p_ab], [p_ba, 1.0 - p_ba]])
    return validate_spec([probs_a, probs_b], kernel, "stationary", name="two_state")


def _builtin_example3(params: dict) -> StackChainSpec:
    """Finite truncation of the slowly-mixing regeneration counterexample.

    States: a drift-carrying stack (p repeated M times) at index 0, then
    "age" stacks j = 1..J whose first cookie is 1/2 - 1/(3j).  From age j the
    chain regenerates to index 0 with the hazard of the gap law at j+1, else
    ages to j+1.  Gap mass beyond J+1 is folded into a forced regeneration at
    age J (the documented truncation): the effective gap law is min(gap, J+1).
    """
    try:
        j_max = int(params["J"])
        p = float(params["p"])
        m = int(params["M"])
    except KeyError as e:
        raise BadParams(f"example3_truncated requires parameter {e}") from e
    gap_law = np.array(params.get("gap_law", _geometric_gap_law(0.5, j_max + 1)), dtype=float)
    if j_max < 1 or m < 1 or not (0.5 < p < 1.0):
        raise BadParams("need J >= 1, M >= 1, p in (0.5, 1)")
    if gap_law.ndim != 1 or np.any(gap_law < 0) or gap_law.sum() <= 0:
        raise BadParams("gap_law must be a nonnegative vector with positive mass")

    # fold the law at J+1: P(gap = J+1) absorbs all mass beyond
    folded = np.zeros(j_max + 1)
    k = min(len(gap_law), j_max + 1)
    folded[:k] = gap_law[:k]
    folded[j_max] += max(0.0, gap_law.sum() - folded.sum())
    folded = folded / folded.sum()
    if folded[0] <= 0.0:
        raise BadParams("gap_law must put mass on gap 1 (aperiodicity)")

    states = [CookieStack((p,) * m)]
    for j in range(1, j_max + 1):
        probs = [0.5 - 1.0 / (3.0 * j)] + [0.5] * (m - 1)
        states.append(CookieStack(tuple(probs)))

    kernel = np.zeros((j_max + 1, j_max + 1))
    survival = 1.0  # P(gap > j)
    for j in range(j_max + 1):
        hazard = folded[j] / survival if survival > 0 else 1.0
        hazard = min(1.0, hazard)
        if j < j_max:
            kernel[j, 0] = hazard
            kernel[j, j + 1] = 1.0 - hazard
        else:
            kernel[j, 0] = 1.0
        survival -= folded[j]
    return validate_spec(states, kernel, "stationary", name="example3_truncated")


def _geometric_gap_law(q: float, length: int) -> np.ndarray:
    j = np.arange(1, length + 1)
    law = q * (1 - q) ** (j - 1)
    return law


_BUILTINS = {
    "placebo": (_builtin_placebo, "single placebo stack, delta = 0"),
    "iid_product": (_builtin_iid_product, "rank-one kernel: i.i.d. stacks with law phi"),
    "two_state": (_builtin_two_state, "two stacks with a 2x2 switching kernel"),
    "example3_truncated": (
        _builtin_example3,
        "truncated regeneration chain with drift above the ballistic threshold",
    ),
}


def builtin_environment(name: str, params: dict | None = None) -> StackChainSpec:
    if name not in _BUILTINS:
        raise UnknownName(f"no builtin environment named {name!r}")
    return _BUILTINS[name][0](params or {})


def list_builtins() -> list[tuple[str, str]]:
    """Names and one-line descriptions, in stable order."""
    return [(k, v[1]) for k, v in sorted(_BUILTINS.items())]


# ---------------------------------------------------------------------------
# spec file format (JSON)
# ---------------------------------------------------------------------------

def spec_to_json(spec: StackChainSpec) -> str:
    """Serialize to the interchange format; floats round-trip exactly."""
    doc = {
        "M": spec.height,
        "states": [list(s.probs) for s in spec.states],
        "kernel": [list(row) for row in spec.kernel],
        "initial": "stationary" if spec.initial_is_stationary else list(spec.initial),
    }
    if spec.name:
        doc["name"] = spec.name
    return json.dumps(doc, indent=2)


def spec_from_json(text: str) -> StackChainSpec:
    doc = json.loads(text)
    try:
        m = int(doc["M"])
        states = doc["states"]
        kernel = np.array(doc["kernel"], dtype=float)
        initial = doc.get("initial", "stationary")
    except KeyError as e:
        raise BadParams(f"spec file missing field {e}") from e
    if kernel.ndim == 1:  # accept a flat row-major kernel
        n = len(states)
        kernel = kernel.reshape(n, n)
    for s in states:
        if len(s) != m:
            raise BadParams(f"state {s} does not have declared height M={m}")
    init = initial if isinstance(initial, str) else np.array(initial, dtype=float)
    return validate_spec(states, kernel, init, name=doc.get("name"))


def load_spec(path: str) -> StackChainSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_json(fh.read())


def save_spec(spec: StackChainSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_to_json(spec))
        fh.write("\n")
