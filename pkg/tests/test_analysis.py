import cmath
import math

import numpy as np
import pytest

import cookiewalk as cw
from cookiewalk.analysis import StableLawParams
from cookiewalk.errors import BadA, DegenerateWindow, TooFewSamples


class TestClassifyPhase:
    @pytest.mark.parametrize(
        "delta,transience,speed,regime",
        [
            (0.0, "recurrent", "zero", None),
            (0.5, "recurrent", "zero", None),
            (1.5, "right-transient", "zero", "i"),
            (2.0, "right-transient", "zero", "ii"),
            (2.5, "right-transient", "positive", "iii"),
            (4.0, "right-transient", "positive", "iv"),
            (6.0, "right-transient", "positive", "v"),
            (-3.0, "left-transient", "negative", "iii"),
        ],
    )
    def test_threshold_table(self, delta, transience, speed, regime):
        rep = cw.classify_phase(delta)
        assert rep.transience == transience
        assert rep.speed == speed
        assert rep.regime == regime

    def test_boundaries_labeled(self):
        assert "transience" in cw.classify_phase(1.0).boundary
        assert "transience" in cw.classify_phase(-1.0).boundary
        assert "speed" in cw.classify_phase(2.0).boundary
        assert "gaussian" in cw.classify_phase(4.0).boundary
        assert cw.classify_phase(0.3).boundary == ()

    def test_odd_symmetry(self):
        swap_t = {"right-transient": "left-transient", "left-transient": "right-transient",
                  "recurrent": "recurrent"}
        swap_s = {"positive": "negative", "negative": "positive", "zero": "zero"}
        for d in np.linspace(-5, 5, 41):
            a, b = cw.classify_phase(float(d)), cw.classify_phase(float(-d))
            assert b.transience == swap_t[a.transience]
            assert b.speed == swap_s[a.speed]
            assert b.regime == a.regime
            if a.regime is not None and d != 0:
                assert a.mirrored != b.mirrored

    def test_mirrored_flag(self):
        assert cw.classify_phase(-3.0).mirrored
        assert not cw.classify_phase(3.0).mirrored


class TestTailFit:
    def test_exact_pareto(self):
        gen = np.random.default_rng(2)
        kappa = 1.5
        samples = gen.uniform(size=10 ** 6) ** (-1.0 / kappa)
        fit = cw.tail_exponent_fit(samples, window=(0.9, 0.999))
        assert 1.45 <= fit.slope <= 1.55
        assert fit.r_squared > 0.999

    def test_exponential_has_no_power_tail(self):
        gen = np.random.default_rng(3)
        samples = gen.exponential(size=10 ** 5)
        fit = cw.tail_exponent_fit(samples, window=(0.9, 0.999))
        assert fit.slope > 2.5          # steep effective slope
        assert 0.0 <= fit.r_squared <= 1.0

    def test_scale_equivariance(self):
        gen = np.random.default_rng(4)
        samples = gen.uniform(size=20000) ** (-1.0 / 2.0)
        a = cw.tail_exponent_fit(samples, window=(0.8, 0.995))
        b = cw.tail_exponent_fit(samples * 137.5, window=(0.8, 0.995))
        assert abs(a.slope - b.slope) <= 1e-9

    def test_censoring_reported(self):
        gen = np.random.default_rng(5)
        samples = gen.uniform(size=5000) ** (-1.0)
        cens = np.zeros(5000, dtype=bool)
        cens[:500] = True
        fit = cw.tail_exponent_fit(samples, censored=cens)
        assert fit.censored_fraction == pytest.approx(0.1)

    def test_errors(self):
        with pytest.raises(TooFewSamples):
            cw.tail_exponent_fit(np.ones(10))
        gen = np.random.default_rng(6)
        with pytest.raises(DegenerateWindow):
            cw.tail_exponent_fit(gen.uniform(size=2000), window=(0.9, 0.9))


class TestStableCf:
    def test_alpha2_real_gaussian(self):
        p = StableLawParams(2.0, 0.7)
        t = np.linspace(-3, 3, 13)
        vals = cw.stable_cf(p, t)
        assert np.allclose(vals.imag, 0.0, atol=1e-15)
        assert np.allclose(vals.real, np.exp(-0.7 * t ** 2))

    def test_t0_is_one(self):
        for a in (0.5, 1.0, 1.5, 2.0):
            assert cw.stable_cf(StableLawParams(a, 2.0), 0.0) == 1.0

    def test_alpha1_log_branch_at_t1(self):
        # log|1| = 0 kills the imaginary correction
        val = cw.stable_cf(StableLawParams(1.0, 1.0, 0.0), 1.0)
        assert val == pytest.approx(cmath.exp(-1.0))

    def test_modulus_and_hermitian(self):
        t = np.linspace(-4, 4, 33)
        for a in (0.7, 1.0, 1.3, 2.0):
            p = StableLawParams(a, 0.9)
            v = cw.stable_cf(p, t)
            assert np.allclose(np.abs(v), np.exp(-0.9 * np.abs(t) ** a), atol=1e-14)
            assert np.allclose(cw.stable_cf(p, -t), np.conj(v), atol=1e-14)

    def test_continuity_at_zero(self):
        for a in (0.8, 1.0, 1.7):
            p = StableLawParams(a, 1.0)
            for t in (1e-3, 1e-6, 1e-9):
                assert abs(cw.stable_cf(p, t) - 1.0) < 0.05

    def test_param_validation(self):
        with pytest.raises(ValueError):
            StableLawParams(2.5, 1.0)
        with pytest.raises(ValueError):
            StableLawParams(1.0, 0.0)


class TestCfDistance:
    def test_standard_normal_match(self):
        gen = np.random.default_rng(8)
        samples = gen.standard_normal(10 ** 4)
        d = cw.cf_distance(samples, StableLawParams(2.0, 0.5))
        assert d.sup <= 0.02

    def test_discrimination(self):
        gen = np.random.default_rng(9)
        samples = gen.standard_normal(10 ** 4)
        d = cw.cf_distance(samples, StableLawParams(2.0, 5.0))
        assert d.sup > 0.3

    def test_fit_gaussian_scale(self):
        gen = np.random.default_rng(10)
        samples = 3.0 * gen.standard_normal(10 ** 5)
        p = cw.fit_gaussian_scale(samples)
        assert p.alpha == 2.0
        assert p.b == pytest.approx(4.5, rel=0.05)


class TestLyapunov:
    def test_flat_small_theta_recurrent(self):
        assert cw.lyapunov_classify({10: 0.5, 100: 0.5, 1000: 0.5}, a=2.0) \
            == "recurrence-criterion met"

    def test_flat_large_theta_transient(self):
        assert cw.lyapunov_classify({100: 3.0, 400: 3.0, 1600: 3.0}, a=2.0) \
            == "transience-criterion met"

    def test_inconclusive_between_bounds(self):
        # between 1 + 1/(a ln x) and 1 + 2a/ln(x) for a = 2
        vals = {x: 1.0 + 1.5 / math.log(x) for x in (100, 400, 1600)}
        assert cw.lyapunov_classify(vals, a=2.0) == "inconclusive"

    def test_never_both(self):
        gen = np.random.default_rng(11)
        for _ in range(200):
            xs = sorted(set(gen.integers(3, 10 ** 6, size=5).tolist()))
            if len(xs) < 3:
                continue
            theta = {int(x): float(gen.uniform(-1, 4)) for x in xs}
            a = float(gen.uniform(1.01, 5.0))
            rec = all(theta[x] <= 1 + 1 / (a * math.log(x)) for x in xs)
            tra = all(theta[x] >= 1 + 2 * a / math.log(x) for x in xs)
            assert not (rec and tra)
            verdict = cw.lyapunov_classify(theta, a)
            assert verdict in ("recurrence-criterion met", "transience-criterion met",
                               "inconclusive")

    def test_bad_a(self):
        with pytest.raises(BadA):
            cw.lyapunov_classify({10: 0.5, 100: 0.5, 1000: 0.5}, a=1.0)


class TestSquaredBessel:
    def test_zero_drift_martingale_mean(self):
        res = cw.simulate_squared_bessel(
            1.0, alpha=1.0, beta=0.0, dt=1e-3, T=1.0, seed=5, n_paths=20000,
            record_paths=False,
        )
        vals = np.where(res.absorbed, 0.0, res.final)  # absorbed mass sits near 0
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - 1.0) <= 3.5 * se + 2e-3

    def test_paths_stay_finite_with_strong_negative_drift(self):
        res = cw.simulate_squared_bessel(
            0.5, alpha=1.0, beta=-3.0, dt=1e-3, T=2.0, seed=6, n_paths=256,
        )
        assert np.all(np.isfinite(res.paths))

    @pytest.mark.parametrize(
        "y,beta,lower,upper",
        [(1.0, 0.0, 0.5, 2.0), (1.5, 0.5, 0.5, 3.0), (2.0, 1.0, 1.0, 4.0)],
    )
    def test_exit_probability_nonnegative_dimension(self, y, beta, lower, upper):
        p_hat, se = cw.squared_bessel_exit(
            y, 1.0, beta, lower, upper, dt=1e-3, n_paths=20000, seed=7,
        )
        if beta == 1.0:  # 1 - beta = 0: logarithmic scale function
            p_exact = (math.log(upper) - math.log(y)) / (math.log(upper) - math.log(lower))
        else:
            p_exact = cw.exit_probability_exact(y, beta, lower, upper)
        assert abs(p_hat - p_exact) <= 0.03

    def test_exit_probability_ballistic_case_is_08(self):
        # 1 - beta = 2: (b^2 - y^2)/(b^2 - a^2) = (4-1)/(4-0.25) = 0.8
        assert cw.exit_probability_exact(1.0, -1.0, 0.5, 2.0) == pytest.approx(0.8)


class TestGammaCentering:
    def test_synthetic_log_inversion(self):
        g = cw.gamma_centering(1000.0, mu_sigma=1.0, d_func=math.log)
        # s log s = 1000 has solution ~ 152.9
        assert g.gamma * math.log(g.gamma) == pytest.approx(1000.0, abs=1e-3)

    def test_monotone_in_n(self):
        gammas = [
            cw.gamma_centering(float(n), 1.0, d_func=lambda s: math.log(s + 2.0)).gamma
            for n in (10, 100, 1000, 10000)
        ]
        assert all(a < b for a, b in zip(gammas, gammas[1:]))

    def test_asymptotic_envelope(self):
        # with D = log, gamma(n) log gamma(n) / n -> 1
        for n in (10 ** 4, 10 ** 6, 10 ** 8):
            g = cw.gamma_centering(float(n), 1.0, d_func=math.log)
            assert g.gamma * math.log(g.gamma) / n == pytest.approx(1.0, rel=1e-6)

    def test_from_renewal_samples(self):
        gen = np.random.default_rng(12)
        q = gen.pareto(1.0, size=20000) + 1.0  # heavy tail with infinite mean
        g = cw.gamma_centering(5000.0, mu_sigma=2.0, q_samples=q)
        assert g.residual() <= g.grid_step + 1e-9
        assert g.gamma > 0


class TestTvHelpers:
    def test_identical_samples_zero(self):
        a = np.array([0, 1, 1, 2, 3])
        assert cw.empirical_tv(a, a) == 0.0

    def test_disjoint_samples_one(self):
        assert cw.empirical_tv(np.zeros(5, dtype=int), np.ones(5, dtype=int)) == 1.0

    def test_tv_against_pmf_exact(self):
        pmf = np.array([0.5, 0.25, 0.125])
        samples = np.array([0] * 500 + [1] * 250 + [2] * 125 + [3] * 125)
        assert cw.tv_against_pmf(samples, pmf, 0.125) == pytest.approx(0.0, abs=1e-12)
