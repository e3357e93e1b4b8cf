"""Reproducible experiment runner.

Each subcommand builds an environment from --builtin or --spec, runs one
experiment kind, writes `report.json` plus CSV data files into --out, and
exits 0 only if every assertion the experiment declares came out true.
All randomness flows from --seed; reports are byte-deterministic unless
--timestamp is given.

Exit codes: 0 pass, 2 configuration error, 3 assertion failure,
4 truncation budget exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, branching, environment, oracle, walk
from .errors import CookieWalkError, PhaseGuard

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSERTION = 3
EXIT_TRUNCATION = 4


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_environment(args) -> environment.StackChainSpec:
    if bool(args.spec) == bool(args.builtin):
        raise CookieWalkError("exactly one of --spec FILE or --builtin NAME is required")
    if args.spec:
        spec = environment.load_spec(args.spec)
    else:
        params = {}
        for item in args.param or []:
            if "=" not in item:
                raise CookieWalkError(f"--param needs key=value, got {item!r}")
            key, val = item.split("=", 1)
            params[key] = _parse_value(val)
        spec = environment.builtin_environment(args.builtin, params)
    if args.strict_stationary and not spec.initial_is_stationary:
        raise CookieWalkError("--strict-stationary requires the initial law to be stationary")
    return spec


def _config_hash(args) -> str:
    skip = {"func"}
    doc = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Report:
    """Accumulates assertion results and serializes the summary."""

    def __init__(self, args, spec=None):
        self.doc = {
            "command": args.command,
            "config_hash": _config_hash(args),
            "seed": args.seed,
            "assertions": [],
            "results": {},
        }
        if spec is not None:
            phase = analysis.classify_phase(spec.delta)
            self.doc["delta"] = spec.delta
            self.doc["phase"] = phase.summary()
        if getattr(args, "timestamp", False):
            import datetime

            self.doc["timestamp"] = datetime.datetime.now().isoformat()

    def check(self, name: str, claim: str, value, passed: bool, tolerance=None):
        self.doc["assertions"].append(
            {
                "name": name,
                "claim": claim,
                "value": value,
                "tolerance": tolerance,
                "pass": bool(passed),
            }
        )

    def result(self, key: str, value):
        self.doc["results"][key] = value

    @property
    def all_pass(self) -> bool:
        return all(a["pass"] for a in self.doc["assertions"])

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.doc["pass"] = self.all_pass
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"unserializable {type(v)}")


def _write_csv(path: Path, header: str, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_classify(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    delta, per_state = environment.compute_delta(spec)
    rep.result("delta", delta)
    rep.result("state_drifts", per_state)
    rep.result("stationary", spec.stationary)
    rep.result("anchor", spec.anchor)
    rep.result("mean_return_time", spec.mean_return_time)
    rev = environment.reverse_environment(spec)
    rep.check(
        "reversal-antisymmetry",
        "spatial reversal negates the drift parameter",
        rev.delta + delta,
        abs(rev.delta + delta) <= 1e-12,
        1e-12,
    )
    rep.write(Path(args.out))
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_walk(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    out = Path(args.out)
    reps, n = args.reps, args.n

    if args.level is not None:
        res = walk.walk_ensemble(
            spec, reps, args.seed, level=args.level, track_left=True,
            step_cap=args.step_cap, keep_engine=True,
        )
        taus = res.steps
        eng = res.engine
        total_left = eng.left.sum(axis=1, dtype=np.int64)
        ok = res.truncated | (taus == args.level + 2 * total_left)
        rep.check(
            "hitting-time-identity",
            "first passage time equals level plus twice the down-crossing total",
            int(ok.sum()),
            bool(ok.all()),
        )
        rows = [
            (r, args.seed, n, int(res.X[r]), int(taus[r]), int(res.truncated[r]))
            for r in range(reps)
        ]
    else:
        xs = _threaded_endpoints(spec, n, reps, args.seed, args.threads)
        v = xs / float(n)
        rep.result("velocity_estimate", float(v.mean()))
        rep.result("velocity_se", float(v.std(ddof=1) / np.sqrt(reps)))
        rows = [(r, args.seed, n, int(xs[r]), "", 0) for r in range(reps)]
    _write_csv(out / "walk.csv", "rep,seed,n,X_n,tau_n,truncated", rows)
    trunc_frac = float(res.truncated.mean()) if args.level is not None else 0.0
    rep.result("truncated_fraction", trunc_frac)
    rep.write(out)
    if trunc_frac > args.max_truncated:
        return EXIT_TRUNCATION
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def _threaded_endpoints(spec, n, reps, seed, threads) -> np.ndarray:
    if threads <= 1:
        return walk.fixed_steps_endpoints(spec, n, reps, seed)
    # documented partitioning: batch i draws replicas from stream seed XOR i
    per = (reps + threads - 1) // threads
    blocks = [(i, min(per, reps - i * per)) for i in range(threads) if i * per < reps]

    def run(block):
        i, r = block
        return walk.fixed_steps_endpoints(spec, n, r, seed ^ i)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, blocks))
    return np.concatenate(parts)


def cmd_branching(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    out = Path(args.out)
    trip = branching.run_coupled_triple(
        spec, "U", start=args.start_level, k_max=args.k_max,
        episodes=args.reps, seed=args.seed,
    )
    holds = trip.domination_holds()
    rep.check(
        "coupled-domination",
        "lower and upper chains sandwich the actual chain pathwise",
        int(np.sum((trip.lower > trip.mid) | (trip.mid > trip.upper))),
        holds,
    )
    rows = None
    if spec.delta > 1.0:
        ss = branching.survival_statistics(spec, args.reps, args.seed)
        rows = [
            (r, "V", int(ss.tau0_hat[r]), int(ss.area_raw[r]), int(ss.sigma0[r]), int(ss.truncated[r]))
            for r in range(args.reps)
        ]
        rep.result("truncated_fraction", ss.truncated_fraction)
    if rows:
        _write_csv(out / "branching.csv", "rep,kind,tau0,area,sigma0,truncated", rows)
    rep.write(out)
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_renewal(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    out = Path(args.out)
    try:
        rec = branching.renewal_decompose(spec, args.reps, args.seed)
    except PhaseGuard as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    ms, ms_se = rec.mu_sigma()
    mq, mq_se = rec.mu_q()
    rep.result("mu_sigma", ms)
    rep.result("mu_sigma_se", ms_se)
    rep.result("mu_q", mq)
    rep.result("mu_q_se", mq_se)
    rep.result("mu_q_trimmed", rec.mu_q_trimmed())
    rep.result("mu_q_divergent", rec.mu_q_divergent)
    rep.result("velocity_formula", rec.velocity() if not rec.mu_q_divergent else None)
    rep.result("truncated_fraction", rec.truncated_fraction)
    rep.check(
        "renewal-gaps-positive",
        "cycle lengths are at least 1",
        int(rec.gaps.min()),
        bool(rec.gaps.min() >= 1),
    )
    _write_csv(
        out / "renewal.csv",
        "i,delta_sigma,Q",
        ((i, int(g), int(q)) for i, (g, q) in enumerate(zip(rec.gaps, rec.areas), start=1)),
    )
    rep.write(out)
    if rec.truncated_fraction > args.max_truncated:
        return EXIT_TRUNCATION
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_tails(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    out = Path(args.out)
    try:
        ss = branching.survival_statistics(spec, args.reps, args.seed)
    except PhaseGuard as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    d = spec.delta
    fit_sigma = analysis.tail_exponent_fit(
        ss.sigma0.astype(float), window=(args.window_lo, args.window_hi), censored=ss.truncated
    )
    area = ss.area_raw.astype(float)
    fit_area = analysis.tail_exponent_fit(
        area[area > 0], window=(args.area_window_lo, args.area_window_hi),
    )
    rep.result("sigma0_exponent", fit_sigma.slope)
    rep.result("sigma0_exponent_se", fit_sigma.slope_se)
    rep.result("area_exponent", fit_area.slope)
    rep.result("area_exponent_se", fit_area.slope_se)
    rep.result("censored_fraction", ss.truncated_fraction)
    rep.check(
        "cycle-length-tail",
        "renewal cycle length tail exponent tracks the drift parameter",
        fit_sigma.slope,
        abs(fit_sigma.slope - d) <= args.tol_sigma,
        args.tol_sigma,
    )
    rep.check(
        "cycle-area-tail",
        "renewal cycle area tail exponent tracks half the drift parameter",
        fit_area.slope,
        abs(fit_area.slope - d / 2.0) <= args.tol_area,
        args.tol_area,
    )
    for name, samples in (("sigma0", ss.sigma0), ("area", ss.area_raw)):
        vals, counts = np.unique(samples[samples > 0], return_counts=True)
        ccdf = 1.0 - np.cumsum(counts) / counts.sum()
        _write_csv(out / f"ccdf_{name}.csv", "x,ccdf", zip(vals, ccdf))
    rep.write(out)
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_limit_law(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    out = Path(args.out)
    phase = analysis.classify_phase(spec.delta)
    regime = args.regime or phase.regime
    if regime is None:
        print("config error: recurrent-phase spec has no limit-law regime", file=sys.stderr)
        return EXIT_CONFIG
    v = args.velocity
    if regime in ("iii", "iv", "v") and v is None:
        vest = walk.velocity_estimate(spec, args.n, max(200, args.reps // 10), args.seed + 1)
        v = vest.estimate
        rep.result("velocity_used", v)
    samples = walk.limit_law_samples(
        spec, args.n, args.reps, regime, args.seed, v=v,
        strict_regime=args.regime is None,
    )
    rep.result("regime", regime)
    rep.result("normalization", samples.normalization)
    _write_csv(out / "limit_law.csv", "rep,sample", enumerate(samples.samples))
    if regime in ("iv", "v"):
        params = analysis.fit_gaussian_scale(samples.samples - samples.samples.mean())
        dist = analysis.cf_distance(samples.samples - samples.samples.mean(), params)
        rep.result("fitted_b", params.b)
        rep.result("cf_sup_distance", dist.sup)
        rep.check(
            "gaussian-limit-shape",
            "normalized displacement matches the index-2 stable transform",
            dist.sup,
            dist.sup <= args.cf_tol,
            args.cf_tol,
        )
    else:
        rep.result("sample_mean", float(samples.samples.mean()))
        rep.result("sample_sd", float(samples.samples.std()))
    rep.write(out)
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_diffusion(args) -> int:
    rep = Report(args)
    out = Path(args.out)
    p_hat, se = analysis.squared_bessel_exit(
        args.y, args.alpha, args.beta, args.lower, args.upper,
        args.dt, args.reps, args.seed,
    )
    p_exact = analysis.exit_probability_exact(args.y, args.beta, args.lower, args.upper)
    rep.result("exit_probability_mc", p_hat)
    rep.result("exit_probability_exact", p_exact)
    rep.result("exit_probability_se", se)
    rep.check(
        "exit-probability",
        "barrier-hitting probability matches the closed form",
        p_hat,
        abs(p_hat - p_exact) <= args.tol,
        args.tol,
    )
    rep.write(out)
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_oracle_check(args) -> int:
    spec = _load_environment(args)
    rep = Report(args, spec)
    out = Path(args.out)
    gen_levels = [0, 1, 2, 5, 12]
    worst = 0.0
    rows = []
    for i, lvl in enumerate(gen_levels):
        state = spec.states[i % spec.n_states]
        pmf, tail = oracle.backward_step_pmf(lvl, state, cap=200)
        draws = branching._steps_vector(
            np.full(args.reps, lvl), np.tile(state.probs, (args.reps, 1)),
            np.random.Generator(np.random.PCG64(args.seed + i)), backward=True,
        )
        tv = analysis.tv_against_pmf(draws, pmf, tail)
        rows.append((lvl, i % spec.n_states, tv))
        worst = max(worst, tv)
    _write_csv(out / "oracle_check.csv", "level,state,tv", rows)
    rep.result("worst_tv", worst)
    rep.check(
        "sampler-oracle-agreement",
        "Monte Carlo one-step laws match the exact step transforms",
        worst,
        worst <= args.tv_tol,
        args.tv_tol,
    )
    rep.write(out)
    return EXIT_OK if rep.all_pass else EXIT_ASSERTION


def cmd_list_builtins(args) -> int:
    for name, desc in environment.list_builtins():
        print(f"{name:22s} {desc}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(p, needs_env=True):
    if needs_env:
        p.add_argument("--spec", help="environment spec file (JSON)")
        p.add_argument("--builtin", help="builtin environment name")
        p.add_argument("--param", action="append", help="builtin parameter key=value")
        p.add_argument("--strict-stationary", action="store_true",
                       help="refuse non-stationary initial laws")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--timestamp", action="store_true", help="include a timestamp in the report")
    p.add_argument("--max-truncated", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cookiewalk", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", help="drift parameter and phase report")
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("walk", help="walk ensemble: endpoints or hitting times")
    _add_common(p)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--level", type=int, help="stop at first passage of this level")
    p.add_argument("--step-cap", type=int, default=walk.DEFAULT_STEP_CAP)
    p.set_defaults(func=cmd_walk)

    p = sub.add_parser("branching", help="chain domination check and survival samples")
    _add_common(p)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--start-level", type=int, default=100)
    p.add_argument("--k-max", type=int, default=50)
    p.set_defaults(func=cmd_branching)

    p = sub.add_parser("renewal", help="renewal cycles and the speed formula")
    _add_common(p)
    p.add_argument("--reps", type=int, default=100000, help="renewal cycles")
    p.set_defaults(func=cmd_renewal)

    p = sub.add_parser("tails", help="tail exponents of cycle lengths and areas")
    _add_common(p)
    p.add_argument("--reps", type=int, default=100000)
    p.add_argument("--window-lo", type=float, default=0.90)
    p.add_argument("--window-hi", type=float, default=0.999)
    p.add_argument("--area-window-lo", type=float, default=0.95)
    p.add_argument("--area-window-hi", type=float, default=0.9995)
    p.add_argument("--tol-sigma", type=float, default=0.4)
    p.add_argument("--tol-area", type=float, default=0.2)
    p.set_defaults(func=cmd_tails)

    p = sub.add_parser("limit-law", help="normalized endpoint law for the drift regime")
    _add_common(p)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--regime", choices=["i", "ii", "iii", "iv", "v"])
    p.add_argument("--velocity", type=float)
    p.add_argument("--cf-tol", type=float, default=0.05)
    p.set_defaults(func=cmd_limit_law)

    p = sub.add_parser("diffusion", help="square-root diffusion barrier check")
    _add_common(p, needs_env=False)
    p.add_argument("--y", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=-1.0)
    p.add_argument("--lower", type=float, default=0.5)
    p.add_argument("--upper", type=float, default=2.0)
    p.add_argument("--dt", type=float, default=1e-4)
    p.add_argument("--reps", type=int, default=100000)
    p.add_argument("--tol", type=float, default=0.02)
    p.set_defaults(func=cmd_diffusion)

    p = sub.add_parser("oracle-check", help="Monte Carlo vs exact one-step laws")
    _add_common(p)
    p.add_argument("--reps", type=int, default=1000000)
    p.add_argument("--tv-tol", type=float, default=0.005)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("list-builtins", help="names of builtin environments")
    p.set_defaults(func=cmd_list_builtins, command="list-builtins")

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CookieWalkError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
