"""Statistical estimation and classification around the drift parameter.

Phase classification from the drift thresholds, power-law tail fitting over a
quantile window, totally asymmetric stable characteristic functions and
empirical-CF distances, the drift-ratio recurrence/transience criterion, the
square-root diffusion that approximates the branching chains, and the
centering sequence for the critical speed regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import BadA, DegenerateWindow, RegimeMismatch, TooFewSamples

# ---------------------------------------------------------------------------
# phase classification
# ---------------------------------------------------------------------------

TRANSIENCE_THRESHOLD = 1.0   # |drift| <= 1: recurrent
SPEED_THRESHOLD = 2.0        # |drift| <= 2: zero speed
GAUSSIAN_THRESHOLD = 4.0     # |drift| > 4: clean sqrt(n) regime


@dataclass(frozen=True)
class PhaseReport:
    delta: float
    transience: str            # 'left-transient' | 'recurrent' | 'right-transient'
    speed: str                 # 'negative' | 'zero' | 'positive'
    regime: str | None         # 'i'..'v' for |delta| > 1, else None
    mirrored: bool             # regime describes -X for negative drift
    boundary: tuple[str, ...]  # which thresholds the drift sits exactly on

    def summary(self) -> str:
        reg = f", regime ({self.regime})" + (" mirrored" if self.mirrored else "") \
            if self.regime else ""
        b = f", boundary: {'/'.join(self.boundary)}" if self.boundary else ""
        return f"delta={self.delta:.6g}: {self.transience}, {self.speed} speed{reg}{b}"


def classify_phase(delta: float) -> PhaseReport:
    """Map the drift parameter to its transience / speed / limit-law phase.

    Thresholds: recurrent iff delta in [-1, 1]; speed zero iff delta in
    [-2, 2]; limit-law regimes at |delta| in (1,2), {2}, (2,4), {4}, (4,inf),
    mirrored for negative drift.  Exact threshold values are labeled as
    boundaries.
    """
    if not math.isfinite(delta):
        raise ValueError("drift must be finite")
    d = abs(delta)
    if delta > TRANSIENCE_THRESHOLD:
        transience = "right-transient"
    elif delta < -TRANSIENCE_THRESHOLD:
        transience = "left-transient"
    else:
        transience = "recurrent"
    if delta > SPEED_THRESHOLD:
        speed = "positive"
    elif delta < -SPEED_THRESHOLD:
        speed = "negative"
    else:
        speed = "zero"
    if d <= 1.0:
        regime = None
    elif d < 2.0:
        regime = "i"
    elif d == 2.0:
        regime = "ii"
    elif d < 4.0:
        regime = "iii"
    elif d == 4.0:
        regime = "iv"
    else:
        regime = "v"
    boundary = tuple(
        name
        for name, at in (
            ("transience", TRANSIENCE_THRESHOLD),
            ("speed", SPEED_THRESHOLD),
            ("gaussian", GAUSSIAN_THRESHOLD),
        )
        if d == at
    )
    return PhaseReport(delta, transience, speed, regime, delta < 0 and regime is not None, boundary)


# ---------------------------------------------------------------------------
# tail exponent fitting
# ---------------------------------------------------------------------------

@dataclass
class TailFitReport:
    slope: float               # kappa in P(X > x) ~ x^-kappa
    intercept: float
    slope_se: float
    r_squared: float
    window: tuple[float, float]
    n_samples: int
    n_window: int
    censored_fraction: float

    def __str__(self) -> str:
        return (
            f"tail exponent {self.slope:.3f} +/- {self.slope_se:.3f} "
            f"(window {self.window}, {self.n_window} pts, R^2={self.r_squared:.3f})"
        )


def tail_exponent_fit(
    samples: np.ndarray,
    window: tuple[float, float] = (0.90, 0.999),
    censored: np.ndarray | None = None,
    min_samples: int = 1000,
) -> TailFitReport:
    """Least-squares slope of log CCDF against log value over a quantile window.

    Returns the positive exponent kappa for P(X > x) ~ x^-kappa.  Censored
    samples are excluded (their fraction reported); the fit is deliberately
    transparent rather than efficient, and is scale-equivariant: rescaling
    the samples moves only the intercept.
    """
    samples = np.asarray(samples, dtype=float)
    if censored is not None:
        cens_frac = float(np.asarray(censored, dtype=bool).mean())
        samples = samples[~np.asarray(censored, dtype=bool)]
    else:
        cens_frac = 0.0
    samples = samples[np.isfinite(samples) & (samples > 0)]
    if len(samples) < min_samples:
        raise TooFewSamples(f"need >= {min_samples} uncensored samples, got {len(samples)}")
    q_lo, q_hi = window
    if not (0.0 < q_lo < q_hi < 1.0):
        raise DegenerateWindow(f"window {window} must satisfy 0 < lo < hi < 1")

    x = np.sort(samples)
    n = len(x)
    lo_val, hi_val = np.quantile(x, [q_lo, q_hi])
    # CCDF at distinct values: P(X > v) with strict inequality
    vals, start_idx = np.unique(x, return_index=True)
    counts = np.diff(np.append(start_idx, n))
    ccdf = 1.0 - (start_idx + counts) / n      # strictly-greater tail
    keep = (vals >= lo_val) & (vals <= hi_val) & (ccdf > 0)
    if keep.sum() < 3:
        raise DegenerateWindow(f"window {window} keeps {int(keep.sum())} distinct points")
    lx = np.log(vals[keep])
    ly = np.log(ccdf[keep])
    a = np.vstack([lx, np.ones_like(lx)]).T
    coef, res, _, _ = np.linalg.lstsq(a, ly, rcond=None)
    slope, intercept = coef
    fitted = a @ coef
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(len(lx) - 2, 1)
    sx = float(np.sum((lx - lx.mean()) ** 2))
    slope_se = math.sqrt(ss_res / dof / sx) if sx > 0 else float("inf")
    return TailFitReport(
        float(-slope), float(intercept), slope_se, r2, window, n, int(keep.sum()), cens_frac
    )


# ---------------------------------------------------------------------------
# stable characteristic functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StableLawParams:
    """Totally asymmetric stable law of index alpha with scale b (shift c at alpha=1)."""

    alpha: float
    b: float
    c: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0):
            raise ValueError("alpha must be in (0, 2]")
        if self.b <= 0.0:
            raise ValueError("b must be > 0")


def stable_cf(params: StableLawParams, t) -> np.ndarray | complex:
    """Characteristic function of the totally asymmetric stable family.

    alpha != 1: exp(-b |t|^alpha (1 - i tan(pi alpha / 2) sgn t)); at
    alpha = 2 the tangent vanishes and the law is normal with variance 2b.
    alpha = 1: exp(i t c - b |t| (1 + (2i/pi) log|t| sgn t)), continuous at 0.
    """
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    a, b, c = params.alpha, params.b, params.c
    out = np.empty(t.shape, dtype=complex)
    nz = t != 0.0
    tt = t[nz]
    if a == 1.0:
        out[nz] = np.exp(
            1j * tt * c - b * np.abs(tt) * (1.0 + (2j / np.pi) * np.log(np.abs(tt)) * np.sign(tt))
        )
    else:
        out[nz] = np.exp(
            -b * np.abs(tt) ** a * (1.0 - 1j * math.tan(math.pi * a / 2.0) * np.sign(tt))
        )
    out[~nz] = 1.0
    return complex(out[0]) if scalar else out


@dataclass
class CfDistance:
    sup: float
    mean: float
    t_grid: np.ndarray


def cf_distance(
    samples: np.ndarray,
    params: StableLawParams,
    t_grid: np.ndarray | None = None,
    min_samples: int = 1000,
) -> CfDistance:
    """Sup and mean absolute gap between the empirical CF and the closed form."""
    samples = np.asarray(samples, dtype=float)
    if len(samples) < min_samples:
        raise TooFewSamples(f"need >= {min_samples} samples, got {len(samples)}")
    if t_grid is None:
        t_grid = np.linspace(-2.0, 2.0, 21)
    t_grid = np.asarray(t_grid, dtype=float)
    emp = np.exp(1j * np.outer(t_grid, samples)).mean(axis=1)
    gap = np.abs(emp - stable_cf(params, t_grid))
    return CfDistance(float(gap.max()), float(gap.mean()), t_grid)


def fit_gaussian_scale(samples: np.ndarray) -> StableLawParams:
    """alpha = 2 parameters by moment matching: variance = 2b."""
    var = float(np.var(np.asarray(samples, dtype=float)))
    return StableLawParams(alpha=2.0, b=var / 2.0)


# ---------------------------------------------------------------------------
# drift-ratio recurrence criterion
# ---------------------------------------------------------------------------

def lyapunov_classify(theta_values: dict, a: float) -> str:
    """Classify via the drift-to-noise ratio of an embedded chain.

    ``theta_values`` maps level x to theta(x) = 2 rho(x) / nu(x).  If
    theta(x) <= 1 + 1/(a ln x) at every supplied level the chain drifts back
    (recurrence criterion met); if theta(x) >= 1 + 2a/ln(x) at every level it
    escapes (transience criterion met); otherwise inconclusive.  The two
    branches cannot both hold for a > 1.
    """
    if not a > 1.0:
        raise BadA(f"criterion parameter a must be > 1, got {a}")
    xs = sorted(theta_values)
    if len(xs) < 3:
        raise ValueError("need theta at >= 3 increasing levels")
    if any(x <= 1 for x in xs):
        raise ValueError("levels must be > 1 for the log bounds")
    rec = all(theta_values[x] <= 1.0 + 1.0 / (a * math.log(x)) for x in xs)
    tra = all(theta_values[x] >= 1.0 + 2.0 * a / math.log(x) for x in xs)
    if rec:
        return "recurrence-criterion met"
    if tra:
        return "transience-criterion met"
    return "inconclusive"


# ---------------------------------------------------------------------------
# square-root diffusion (generalized squared Bessel)
# ---------------------------------------------------------------------------

@dataclass
class DiffusionResult:
    t: np.ndarray | None           # time grid when paths are recorded
    paths: np.ndarray | None       # (n_paths, len(t)) or None for large runs
    final: np.ndarray              # value at T or at absorption, clamped
    absorption_time: np.ndarray    # first passage below eps; inf if none by T
    absorbed: np.ndarray


def simulate_squared_bessel(
    y: float,
    alpha: float,
    beta: float,
    dt: float,
    T: float,
    seed: int,
    n_paths: int = 1,
    eps: float = 1e-6,
    record_paths: bool | None = None,
) -> DiffusionResult:
    """Euler-Maruyama for dY = alpha beta dt + sqrt(2 alpha max(Y,0)) dB.

    Rescaled by 2/alpha this is a squared Bessel process of generalized
    dimension 2 beta.  The positive part inside the square root keeps the
    diffusion coefficient defined after overshoots; paths stop (for
    bookkeeping) at the first crossing below ``eps``, the proxy for hitting 0.
    """
    if y <= 0 or dt <= 0 or T <= 0:
        raise ValueError("need y > 0, dt > 0, T > 0")
    n_steps = int(round(T / dt))
    gen = rng.generator(seed)
    if record_paths is None:
        record_paths = n_paths <= 64
    yv = np.full(n_paths, float(y))
    absorbed = np.zeros(n_paths, dtype=bool)
    atime = np.full(n_paths, np.inf)
    paths = np.empty((n_paths, n_steps + 1)) if record_paths else None
    if record_paths:
        paths[:, 0] = yv
    sq = math.sqrt(dt)
    for k in range(n_steps):
        live = ~absorbed
        if np.any(live):
            dw = gen.standard_normal(int(live.sum())) * sq
            cur = yv[live]
            yv[live] = cur + alpha * beta * dt + np.sqrt(2.0 * alpha * np.maximum(cur, 0.0)) * dw
            newly = live.copy()
            newly[live] = yv[live] <= eps
            atime[newly & ~absorbed] = (k + 1) * dt
            absorbed |= newly
        if record_paths:
            paths[:, k + 1] = yv
    t = np.linspace(0.0, n_steps * dt, n_steps + 1) if record_paths else None
    return DiffusionResult(t, paths, yv, atime, absorbed)


def squared_bessel_exit(
    y: float,
    alpha: float,
    beta: float,
    lower: float,
    upper: float,
    dt: float,
    n_paths: int,
    seed: int,
    t_cap: float = 1e3,
    batch: int = 200_000,
) -> tuple[float, float]:
    """Monte Carlo P(hit lower barrier before upper), with standard error.

    The exact value for this diffusion is
    (upper^(1-beta) - y^(1-beta)) / (upper^(1-beta) - lower^(1-beta)).
    """
    if not 0 <= lower < y < upper:
        raise ValueError("need 0 <= lower < y < upper")
    hits = 0
    done = 0
    sq = math.sqrt(dt)
    n_steps = int(round(t_cap / dt))
    block = 0
    while done < n_paths:
        n = min(batch, n_paths - done)
        gen = rng.generator(seed, block)
        yv = np.full(n, float(y))
        live = np.ones(n, dtype=bool)
        hit_low = np.zeros(n, dtype=bool)
        for _ in range(n_steps):
            idx = np.flatnonzero(live)
            if idx.size == 0:
                break
            cur = yv[idx]
            dw = gen.standard_normal(idx.size) * sq
            nxt = cur + alpha * beta * dt + np.sqrt(2.0 * alpha * np.maximum(cur, 0.0)) * dw
            yv[idx] = nxt
            low = nxt <= lower
            high = nxt >= upper
            hit_low[idx[low]] = True
            live[idx[low | high]] = False
        hits += int(hit_low.sum())
        done += n
        block += 1
    p = hits / n_paths
    return p, math.sqrt(p * (1 - p) / n_paths)


def exit_probability_exact(y: float, beta: float, lower: float, upper: float) -> float:
    """Closed-form P(hit lower before upper) for the square-root diffusion."""
    e = 1.0 - beta
    return (upper ** e - y ** e) / (upper ** e - lower ** e)


def absorption_time_samples(
    y: float,
    alpha: float,
    beta: float,
    dt: float,
    n_paths: int,
    seed: int,
    eps: float = 1e-6,
    t_cap: float = 1e4,
    batch: int = 200_000,
) -> tuple[np.ndarray, np.ndarray]:
    """First passage times below eps; censored entries carry the cap and a flag."""
    times = np.empty(n_paths)
    censored = np.zeros(n_paths, dtype=bool)
    done = 0
    block = 0
    n_steps = int(round(t_cap / dt))
    sq = math.sqrt(dt)
    while done < n_paths:
        n = min(batch, n_paths - done)
        gen = rng.generator(seed, 7, block)
        yv = np.full(n, float(y))
        live = np.ones(n, dtype=bool)
        tloc = np.full(n, t_cap)
        for k in range(n_steps):
            idx = np.flatnonzero(live)
            if idx.size == 0:
                break
            cur = yv[idx]
            dw = gen.standard_normal(idx.size) * sq
            nxt = cur + alpha * beta * dt + np.sqrt(2.0 * alpha * np.maximum(cur, 0.0)) * dw
            yv[idx] = nxt
            hit = nxt <= eps
            tloc[idx[hit]] = (k + 1) * dt
            live[idx[hit]] = False
        times[done:done + n] = tloc
        censored[done:done + n] = live
        done += n
        block += 1
    return times, censored


# ---------------------------------------------------------------------------
# centering sequence for the critical speed regime
# ---------------------------------------------------------------------------

@dataclass
class GammaCentering:
    n: float
    gamma: float
    d_at_gamma: float
    grid_step: float
    bracket_lo: float   # gamma - bracket_lo <= grid_step and lo * D(lo) < n

    def residual(self) -> float:
        """gamma * D(gamma) - n.

        Nonnegative by construction; for smooth D it is O(grid step), while a
        jump of s * D(s) at the solution (step-function D built from renewal
        samples) passes through to the residual and is reported, not hidden.
        """
        return self.gamma * self.d_at_gamma - self.n


def gamma_centering(
    n: float,
    mu_sigma: float,
    q_samples: np.ndarray | None = None,
    d_func=None,
    c_hat: float = 0.0,
    grid_step: float | None = None,
) -> GammaCentering:
    """Invert s * D(s) = n for the centering sequence of the critical regime.

    D is either supplied directly (``d_func``) or built from renewal areas as
    D(t) = c_hat + 1 + 2 * truncated_mean(Q, t / mu_sigma) / mu_sigma.  The
    inversion is by expanding bracket plus bisection: the returned gamma is
    the right end of a bracket of width <= grid_step whose left end still has
    s * D(s) < n.
    """
    if d_func is None:
        if q_samples is None:
            raise RegimeMismatch("supply either renewal areas q_samples or d_func")
        q = np.sort(np.asarray(q_samples, dtype=float))
        cumsum = np.concatenate(([0.0], np.cumsum(q)))

        def d_func(t):
            k = np.searchsorted(q, t / mu_sigma, side="right")
            trunc_mean = cumsum[k] / len(q)
            return c_hat + 1.0 + 2.0 * trunc_mean / mu_sigma

    if grid_step is None:
        grid_step = max(n * 1e-9, 1e-12)

    def g(s):
        return s * d_func(s)

    hi = max(n, 2.0)
    while g(hi) < n:
        hi *= 2.0
        if hi > 1e18:
            raise RegimeMismatch("s * D(s) never reaches n; D looks degenerate")
    lo = min(1.0, hi / 2.0)
    while lo > grid_step and g(lo) >= n:
        lo /= 2.0
    for _ in range(200):
        if hi - lo <= grid_step:
            break
        mid = 0.5 * (lo + hi)
        if g(mid) >= n:
            hi = mid
        else:
            lo = mid
    return GammaCentering(n, hi, d_func(hi), grid_step)


# ---------------------------------------------------------------------------
# small shared statistics helpers
# ---------------------------------------------------------------------------

def empirical_tv(a: np.ndarray, b: np.ndarray) -> float:
    """Total variation distance between two integer-sample empirical laws."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    pa = np.bincount(a - lo, minlength=hi - lo + 1) / len(a)
    pb = np.bincount(b - lo, minlength=hi - lo + 1) / len(b)
    return 0.5 * float(np.abs(pa - pb).sum())


def tv_against_pmf(samples: np.ndarray, pmf: np.ndarray, tail_mass: float = 0.0) -> float:
    """TV distance between an empirical law and an exact pmf with tail mass."""
    samples = np.asarray(samples, dtype=np.int64)
    cap = len(pmf) - 1
    emp = np.bincount(np.minimum(samples, cap + 1), minlength=cap + 2) / len(samples)
    exact = np.concatenate((pmf, [tail_mass]))
    return 0.5 * float(np.abs(emp - exact).sum())
