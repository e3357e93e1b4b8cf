import numpy as np
import pytest

import cookiewalk as cw
from cookiewalk import rng
from cookiewalk.branching import _steps_vector
from cookiewalk.environment import CookieStack
from cookiewalk.errors import CapTooSmall
from cookiewalk.oracle import (
    matrix_from_text,
    matrix_to_text,
    pmf_from_text,
    pmf_to_text,
    step_matrix,
)

UNIFORM2 = np.array([[0.5, 0.5], [0.5, 0.5]])


# ---------------------------------------------------------------------------
# independent oracle: enumerate coin sequences outcome by outcome
# ---------------------------------------------------------------------------

def enumerate_step(level, probs, depth, backward):
    """Exact step law by expanding every coin sequence up to `depth` coins.

    Probability of each branch is multiplied out coin by coin; the returned
    dict maps output value -> exact probability, plus the unresolved mass.
    Completely independent of the package's DP/negative-binomial route.
    """
    target = level + 1 if backward else level
    out = {}
    unresolved = [0.0]

    def coin_prob(i):
        return probs[i - 1] if i <= len(probs) else 0.5

    def rec(i, stops, counted, prob):
        if stops == target:
            out[counted] = out.get(counted, 0.0) + prob
            return
        if i > depth:
            unresolved[0] += prob
            return
        p = coin_prob(i)
        p_stop = p if backward else 1.0 - p
        rec(i + 1, stops + 1, counted, prob * p_stop)
        rec(i + 1, stops, counted + 1, prob * (1.0 - p_stop))

    if target == 0:
        return {0: 1.0}, 0.0
    rec(1, 0, 0, 1.0)
    return out, unresolved[0]


def pmf_vs_enumeration(level, stack, backward, depth=28, tol=1e-9):
    exact, unresolved = enumerate_step(level, stack.probs, depth, backward)
    fn = cw.backward_step_pmf if backward else cw.forward_step_pmf
    pmf, tail = fn(level, stack, cap=depth)
    for j, p in exact.items():
        if j <= depth:
            assert abs(pmf[j] - p) <= tol + unresolved, (level, j, pmf[j], p)
    assert unresolved < 1e-5


class TestStepPmfs:
    def test_forward_u0_point_mass(self):
        pmf, tail = cw.forward_step_pmf(0, CookieStack((0.75,)), 5)
        assert pmf[0] == 1.0 and tail == 0.0

    def test_forward_hand_values(self):
        # one cookie at 0.75 then fair coins, from level 1:
        # pmf(0) = 0.25, pmf(j) = 0.75 * (1/2)^j for j >= 1
        pmf, _ = cw.forward_step_pmf(1, CookieStack((0.75,)), 12)
        assert abs(pmf[0] - 0.25) < 1e-12
        for j in range(1, 13):
            assert abs(pmf[j] - 0.75 * 0.5 ** j) < 1e-12

    def test_backward_hand_values(self):
        pmf, _ = cw.backward_step_pmf(0, CookieStack((0.75,)), 12)
        assert abs(pmf[0] - 0.75) < 1e-12
        for j in range(1, 13):
            assert abs(pmf[j] - 0.25 * 0.5 ** j) < 1e-12

    def test_backward_placebo_geometric(self):
        pmf, _ = cw.backward_step_pmf(0, CookieStack((0.5,)), 20)
        assert np.allclose(pmf, [0.5 ** (j + 1) for j in range(21)], atol=1e-14)

    @pytest.mark.parametrize("backward", [False, True])
    @pytest.mark.parametrize("level", [0, 1, 2, 3, 5])
    def test_against_enumeration(self, level, backward):
        depth = 24 + 5 * level  # deep enough that the unresolved mass is tiny
        pmf_vs_enumeration(level, CookieStack((0.75,)), backward, depth)
        pmf_vs_enumeration(level, CookieStack((0.9, 0.3, 0.7)), backward, depth)

    @pytest.mark.parametrize("stack", [CookieStack((0.9, 0.9)), CookieStack((0.2, 0.8, 0.45))])
    def test_mean_identities(self, stack):
        m = stack.height
        for u in range(m, m + 6):
            pmf, tail = cw.forward_step_pmf(u, stack, 500)
            mean = float(np.arange(501) @ pmf)
            assert tail < 1e-12
            assert abs(mean - u - stack.drift) <= 1e-9
        for v in range(m, m + 6):
            pmf, tail = cw.backward_step_pmf(v, stack, 500)
            mean = float(np.arange(501) @ pmf)
            assert abs(mean - v - (1.0 - stack.drift)) <= 1e-9

    def test_mass_conservation(self):
        gen = np.random.default_rng(5)
        for _ in range(20):
            m = gen.integers(1, 5)
            stack = CookieStack(tuple(gen.uniform(0.1, 0.9, m)))
            level = int(gen.integers(0, 12))
            cap = int(gen.integers(max(level, 1), 60))
            for fn in (cw.forward_step_pmf, cw.backward_step_pmf):
                pmf, tail = fn(level, stack, cap)
                assert abs(pmf.sum() + tail - 1.0) <= 1e-12

    def test_tail_negligible_at_large_cap(self):
        # from level 10 the mass beyond cap 50 is ~5e-8 (fair negative-binomial
        # mixture, checked against scipy.stats.nbinom survival functions)
        from scipy.stats import nbinom

        pmf, tail = cw.backward_step_pmf(10, CookieStack((0.5,)), 50)
        expected = 0.5 * nbinom.sf(50, 10, 0.5) + 0.5 * nbinom.sf(49, 11, 0.5)
        assert tail == pytest.approx(expected, rel=1e-9)
        for stack in (CookieStack((0.5,)), CookieStack((0.9, 0.2))):
            _, tail = cw.backward_step_pmf(10, stack, 50)
            assert 0 < tail < 1e-6


class TestStepMatrices:
    @pytest.mark.parametrize("backward", [False, True])
    def test_rows_match_pmfs(self, backward):
        stack = CookieStack((0.9, 0.3, 0.7))
        P, ov = step_matrix(stack, 60, backward)
        fn = cw.backward_step_pmf if backward else cw.forward_step_pmf
        for x in (0, 1, 2, 3, 4, 10, 37, 60):
            pmf, tail = fn(x, stack, 60)
            assert np.allclose(P[x], pmf, atol=1e-13)
            assert abs(ov[x] - tail) < 1e-13


class TestChainMatrix:
    def test_hand_assembled_placebo_cap2(self):
        # single placebo stack, level cap 2: 3 levels + overflow = 4x4.
        spec = cw.builtin_environment("placebo")
        mat = cw.build_vr_matrix(spec, 2)
        full = mat.full_matrix()
        nb1 = [0.5, 0.25, 0.125]          # from level 0: failures before 1st success
        nb2 = [0.25, 0.25, 0.1875]        # from level 1: before 2nd success
        nb3 = [0.125, 0.1875, 0.1875]     # from level 2: before 3rd success
        expect = np.zeros((4, 4))
        expect[0, :3], expect[1, :3], expect[2, :3] = nb1, nb2, nb3
        expect[:3, 3] = 1.0 - expect[:3, :3].sum(axis=1)
        expect[3, 3] = 1.0
        assert np.allclose(full, expect, atol=1e-12)

    def test_row_sums_random_specs(self):
        gen = np.random.default_rng(3)
        for _ in range(5):
            n = int(gen.integers(1, 4))
            states = gen.uniform(0.2, 0.8, size=(n, 2))
            kernel = gen.uniform(0.1, 1.0, size=(n, n))
            kernel /= kernel.sum(axis=1, keepdims=True)
            spec = cw.validate_spec(states, kernel)
            mat = cw.build_chain_matrix(spec, 40, kind="V")
            assert mat.row_sum_check() <= 1e-12
            full = mat.full_matrix()
            assert np.max(np.abs(full.sum(axis=1) - 1.0)) <= 1e-12

    def test_overflow_guard(self):
        spec = cw.builtin_environment("placebo")
        with pytest.raises(CapTooSmall):
            cw.build_vr_matrix(spec, 30, overflow_guard=1e-6)

    def test_one_step_law_vs_monte_carlo(self):
        spec = cw.validate_spec([(0.9, 0.9), (0.2, 0.2)], UNIFORM2)
        v0, state = 3, 1
        pmf, tail = cw.backward_step_pmf(v0, spec.states[state], 100)
        gen = rng.generator(17)
        draws = _steps_vector(
            np.full(100000, v0), np.tile(spec.states[state].probs, (100000, 1)),
            gen, backward=True,
        )
        assert cw.tv_against_pmf(draws, pmf, tail) <= 0.02


class TestSurvival:
    def test_t0_is_one_and_placebo_first_step(self):
        spec = cw.builtin_environment("placebo")
        mat = cw.build_vr_matrix(spec, 150)
        curve = cw.exact_survival_tail(mat, 10)
        assert curve.survival[0] == 1.0
        assert abs(curve.survival[1] - 0.5) <= 1e-12
        assert np.all(np.diff(curve.survival) <= 0)

    def test_monte_carlo_within_bands(self):
        spec = cw.validate_spec([(0.875,) * 4], np.array([[1.0]]))  # drift 3
        mat = cw.build_vr_matrix(spec, 400)
        curve = cw.exact_survival_tail(mat, 50)
        ss = cw.survival_statistics(spec, episodes=200000, seed=23)
        for t in (1, 2, 5, 10, 25, 50):
            p_hat = float((ss.sigma0 > t).mean())
            p = curve.survival[t]
            se = np.sqrt(max(p * (1 - p), 1e-12) / 200000)
            assert abs(p_hat - p) <= 4 * se + curve.error_bound[t] + 1e-4


class TestHattedTransition:
    def test_single_state_equals_raw_step(self):
        spec = cw.builtin_environment("placebo")
        ht = cw.exact_hatted_transition(4, spec, 80, kind="V")
        pmf, tail = cw.backward_step_pmf(4, spec.states[0], 80)
        assert np.allclose(ht.pmf, pmf, atol=1e-13)
        assert abs(ht.overflow - tail) < 1e-13

    def test_two_state_mass_and_mc(self):
        spec = cw.validate_spec([(0.9, 0.9), (0.2, 0.2)], UNIFORM2)
        ht = cw.exact_hatted_transition(5, spec, 200, kind="V")
        assert ht.pmf.sum() + ht.overflow == pytest.approx(1.0, abs=1e-8)
        samples = cw.run_hatted("V", spec, start=5, episodes=100000, seed=31)
        tv = cw.tv_against_pmf(samples.values[:, 0], ht.pmf, ht.overflow)
        assert tv <= 0.02

    def test_dense_and_iterative_solves_agree(self):
        import cookiewalk.oracle as om

        spec = cw.validate_spec([(0.9, 0.9), (0.2, 0.2)], UNIFORM2)
        a = cw.exact_hatted_transition(5, spec, 150, kind="V")
        saved = om.DENSE_SOLVE_MAX_UNKNOWNS
        om.DENSE_SOLVE_MAX_UNKNOWNS = 0
        try:
            b = cw.exact_hatted_transition(5, spec, 150, kind="V")
        finally:
            om.DENSE_SOLVE_MAX_UNKNOWNS = saved
        assert np.allclose(a.pmf, b.pmf, atol=1e-12)
        assert abs(a.overflow - b.overflow) < 1e-10


class TestTheta:
    def test_placebo_limits(self):
        spec = cw.builtin_environment("placebo")
        th = cw.exact_theta(120, spec)
        assert abs(th.rho) < 1e-9
        assert abs(th.nu - 2.0) < 1e-9
        assert abs(th.theta) < 1e-9

    def test_drift_and_noise_match_return_laws(self):
        # rho -> drift * mean-return-time, nu -> 2 * mean-return-time
        spec = cw.validate_spec([(0.9, 0.9), (0.2, 0.2)], UNIFORM2)
        th = cw.exact_theta(400, spec)
        mu = spec.mean_return_time
        assert abs(th.rho - spec.delta * mu) < 1e-3
        assert abs(th.nu - 2.0 * mu) < 0.05
        assert abs(th.theta - spec.delta) < 0.01

    def test_theta_error_shrinks_with_level(self):
        spec = cw.validate_spec([(0.9, 0.9), (0.2, 0.2)], UNIFORM2)
        errs = [abs(cw.exact_theta(x, spec).theta - spec.delta) for x in (50, 200, 800)]
        assert errs[2] < errs[0]

    def test_cap_too_small(self):
        spec = cw.builtin_environment("placebo")
        with pytest.raises(CapTooSmall):
            cw.exact_theta(100, spec, level_cap=110, max_doublings=0, overflow_tol=1e-30)


class TestFixtureExport:
    def test_pmf_round_trip(self):
        pmf, tail = cw.backward_step_pmf(2, CookieStack((0.31, 0.77)), 25)
        text = pmf_to_text(pmf, tail)
        back, tail2 = pmf_from_text(text)
        assert np.array_equal(back, pmf)
        assert tail2 == tail

    def test_matrix_round_trip(self):
        spec = cw.builtin_environment("placebo")
        full = cw.build_vr_matrix(spec, 3).full_matrix()
        assert np.array_equal(matrix_from_text(matrix_to_text(full)), full)
