import json

import numpy as np
import pytest

import cookiewalk as cw
from cookiewalk import rng
from cookiewalk.errors import (
    BadInitial,
    BadParams,
    NonStochasticRow,
    NotElliptic,
    Periodic,
    Reducible,
    TwoSidedNonStationary,
    UnknownName,
)

UNIFORM2 = np.array([[0.5, 0.5], [0.5, 0.5]])


def two_state_02():
    return cw.validate_spec([(0.9, 0.9), (0.2, 0.2)], UNIFORM2)


def random_spec(gen, n_states=None, m=None):
    n = n_states or gen.integers(1, 5)
    m = m or gen.integers(1, 4)
    states = gen.uniform(0.05, 0.95, size=(n, m))
    kernel = gen.uniform(0.05, 1.0, size=(n, n))
    kernel /= kernel.sum(axis=1, keepdims=True)
    return cw.validate_spec(states, kernel)


class TestValidation:
    def test_single_state(self):
        spec = cw.validate_spec([(0.5,)], np.array([[1.0]]))
        assert spec.delta == 0.0
        assert spec.stationary[0] == 1.0

    def test_worked_two_state_example(self):
        spec = two_state_02()
        assert np.allclose(spec.stationary, [0.5, 0.5])
        assert np.allclose(spec.state_drifts, [1.6, -1.2])
        assert abs(spec.delta - 0.2) < 1e-14

    def test_identity_kernel_reducible(self):
        with pytest.raises(Reducible):
            cw.validate_spec([(0.4,), (0.6,)], np.eye(2))

    def test_alternating_kernel_periodic(self):
        with pytest.raises(Periodic):
            cw.validate_spec([(0.4,), (0.6,)], np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_non_stochastic_row(self):
        with pytest.raises(NonStochasticRow) as ei:
            cw.validate_spec([(0.4,), (0.6,)], np.array([[0.5, 0.4], [0.5, 0.5]]))
        assert ei.value.row == 0

    def test_not_elliptic(self):
        with pytest.raises(NotElliptic):
            cw.validate_spec([(1.0,)], np.array([[1.0]]))
        with pytest.raises(NotElliptic):
            cw.validate_spec([(0.0,)], np.array([[1.0]]))

    def test_unequal_heights(self):
        with pytest.raises(NotElliptic):
            cw.validate_spec([(0.4,), (0.6, 0.6)], UNIFORM2)

    def test_bad_initial(self):
        with pytest.raises(BadInitial):
            cw.validate_spec([(0.4,), (0.6,)], UNIFORM2, initial=np.array([0.7, 0.7]))


class TestStationary:
    def test_hand_solved_2x2(self):
        pi = cw.stationary_distribution(np.array([[0.9, 0.1], [0.4, 0.6]]))
        assert np.allclose(pi, [0.8, 0.2], atol=1e-12)

    def test_doubly_stochastic_uniform(self):
        k = np.array([[0.2, 0.5, 0.3], [0.5, 0.3, 0.2], [0.3, 0.2, 0.5]])
        pi = cw.stationary_distribution(k)
        assert np.allclose(pi, 1.0 / 3.0, atol=1e-12)

    def test_invariants_random_specs(self):
        gen = np.random.default_rng(7)
        for _ in range(20):
            spec = random_spec(gen)
            pi = spec.stationary
            assert abs(pi.sum() - 1.0) < 1e-12
            assert np.max(np.abs(pi @ spec.kernel - pi)) <= 1e-10
            ktilde = spec.kernel_reversed
            assert np.max(np.abs(ktilde.sum(axis=1) - 1.0)) <= 1e-10
            assert np.max(np.abs(pi @ ktilde - pi)) <= 1e-10


class TestReversal:
    def test_delta_negation_20_random(self):
        gen = np.random.default_rng(11)
        for _ in range(20):
            spec = random_spec(gen)
            rev = cw.reverse_environment(spec)
            assert abs(rev.delta + spec.delta) <= 1e-12

    def test_double_reversal_restores_delta(self):
        spec = two_state_02()
        assert abs(cw.reverse_environment(cw.reverse_environment(spec)).delta - spec.delta) <= 1e-12

    def test_placebo_fixed_point(self):
        spec = cw.builtin_environment("placebo")
        rev = cw.reverse_environment(spec)
        assert rev.states[0].probs == (0.5,)
        assert rev.delta == 0.0

    def test_delta_invariant_under_relabeling(self):
        gen = np.random.default_rng(13)
        for _ in range(10):
            spec = random_spec(gen, n_states=4)
            perm = gen.permutation(4)
            kernel = spec.kernel[np.ix_(perm, perm)]
            states = [spec.states[i] for i in perm]
            relabeled = cw.validate_spec(states, kernel)
            assert abs(relabeled.delta - spec.delta) <= 1e-12


class TestErgodicityDiagnostic:
    def test_uniform_kernel_mixes_in_one_step(self):
        d = cw.uniform_ergodicity_diagnostic(UNIFORM2, 3)
        assert np.allclose(d, 0.0, atol=1e-15)

    def test_geometric_decay_rate_second_eigenvalue(self):
        # eigenvalues of [[.9,.1],[.4,.6]] are 1 and 0.5
        d = cw.uniform_ergodicity_diagnostic(np.array([[0.9, 0.1], [0.4, 0.6]]), 12)
        ratios = d[1:] / d[:-1]
        assert np.allclose(ratios, 0.5, atol=1e-10)

    def test_nonincreasing_even_near_reducible(self):
        k = np.array([[0.999, 0.001], [0.001, 0.999]])
        d = cw.uniform_ergodicity_diagnostic(k, 50)
        assert np.all(np.diff(d) <= 1e-12)
        assert d[-1] > 0.4  # slow decay reported, not an error


class TestRealization:
    def test_memoization_and_query_order(self):
        spec = two_state_02()
        r1 = cw.realize_environment(spec, 42)
        r2 = cw.realize_environment(spec, 42)
        sites = [5, -3, 0, 17, -11, 5, -3]
        first = [r1.state_index(s) for s in sites]
        assert first == [r1.state_index(s) for s in sites]  # re-query identical
        # a twin realization queried in reverse order agrees site by site
        assert {s: r2.state_index(s) for s in reversed(sites)} == dict(zip(sites, first))

    def test_different_seeds_differ(self):
        spec = two_state_02()
        a = [cw.realize_environment(spec, 1).state_index(k) for k in range(40)]
        b = [cw.realize_environment(spec, 2).state_index(k) for k in range(40)]
        assert a != b

    def test_strict_mode_negative_site(self):
        spec = cw.validate_spec(
            [(0.9, 0.9), (0.2, 0.2)], UNIFORM2, initial=np.array([1.0, 0.0])
        )
        strict = cw.realize_environment(spec, 3)
        with pytest.raises(TwoSidedNonStationary):
            strict.state_index(-1)
        permissive = cw.realize_environment(spec, 3, strict=False)
        assert permissive.state_index(-1) in (0, 1)

    def test_site_marginal_near_stationary(self):
        # empirical marginal at site 50 over many seeds vs pi, TV <= 0.01
        spec = cw.validate_spec([(0.9,), (0.2,)], np.array([[0.85, 0.15], [0.3, 0.7]]))
        seeds = rng.derive_seed_array(99, np.arange(100000, dtype=np.uint64))
        u0 = rng.env_uniform_array(seeds, 0)
        init_cum = np.cumsum(spec.initial)
        states = (u0[:, None] >= init_cum[None, :]).sum(axis=1)
        fwd_cum = np.cumsum(spec.kernel, axis=1)
        for site in range(1, 51):
            u = rng.env_uniform_array(seeds, site)
            states = (u[:, None] >= fwd_cum[states]).sum(axis=1)
        freq = np.bincount(states, minlength=2) / len(states)
        assert 0.5 * np.abs(freq - spec.stationary).sum() <= 0.01
        # the vectorized extension above agrees with the scalar realization
        for i in range(5):
            realz = cw.EnvironmentRealization(spec, int(seeds[i]))
            assert realz.state_index(50) == states[i]


class TestBuiltins:
    def test_placebo(self):
        spec = cw.builtin_environment("placebo")
        assert spec.delta == 0.0

    def test_iid_product_rank_one(self):
        phi = [0.3, 0.7]
        spec = cw.builtin_environment(
            "iid_product", {"states": [(0.8,), (0.3,)], "phi": phi}
        )
        assert np.allclose(spec.kernel, np.tile(phi, (2, 1)))
        # for rank-one kernels pi = phi, so delta = sum phi(s) drift(s) exactly
        drifts = spec.state_drifts
        assert abs(spec.delta - (0.3 * drifts[0] + 0.7 * drifts[1])) < 1e-15

    def test_two_state_builtin(self):
        spec = cw.builtin_environment("two_state")
        assert abs(spec.delta - 0.2) < 1e-14

    def test_regeneration_delta_formula(self):
        # single drift-carrying stack among placebos: delta = M(2p-1) * pi(s0),
        # and pi(s0) is the reciprocal mean regeneration distance
        m, p = 6, 0.9
        states = [(p,) * m, (0.5,) * m, (0.5,) * m]
        kernel = np.array([[0.2, 0.8, 0.0], [0.0, 0.2, 0.8], [0.9, 0.0, 0.1]])
        spec = cw.validate_spec(states, kernel)
        expected = m * (2 * p - 1) * spec.stationary[0]
        assert abs(spec.delta - expected) < 1e-12
        assert abs(spec.stationary[0] - 1.0 / (1.0 / spec.stationary[0])) < 1e-12

    def test_example3_truncated_exceeds_ballistic_threshold(self):
        spec = cw.builtin_environment(
            "example3_truncated", {"J": 40, "p": 0.95, "M": 16}
        )
        assert spec.delta > 2.0
        assert all(0.0 < q < 1.0 for s in spec.states for q in s.probs)
        # age-j stacks carry the slightly-left first cookie
        assert abs(spec.states[1].probs[0] - (0.5 - 1.0 / 3.0)) < 1e-15

    def test_unknown_name(self):
        with pytest.raises(UnknownName):
            cw.builtin_environment("nope")

    def test_bad_params(self):
        with pytest.raises(BadParams):
            cw.builtin_environment("example3_truncated", {"J": 40, "p": 0.4, "M": 2})

    def test_listing_is_stable(self):
        a = cw.list_builtins()
        b = cw.list_builtins()
        assert a == b
        names = [n for n, _ in a]
        assert "placebo" in names and "example3_truncated" in names


class TestSpecFiles:
    def test_round_trip_exact(self, tmp_path):
        spec = cw.validate_spec(
            [(0.123456789012345, 0.9), (0.2, 0.3)], UNIFORM2, initial=np.array([0.25, 0.75])
        )
        path = tmp_path / "env.json"
        cw.save_spec(spec, str(path))
        loaded = cw.load_spec(str(path))
        assert loaded.states == spec.states
        assert np.array_equal(loaded.kernel, spec.kernel)
        assert np.array_equal(loaded.initial, spec.initial)

    def test_stationary_literal(self):
        doc = {"M": 1, "states": [[0.9], [0.2]], "kernel": [[0.5, 0.5], [0.5, 0.5]],
               "initial": "stationary"}
        spec = cw.spec_from_json(json.dumps(doc))
        assert spec.initial_is_stationary

    def test_flat_row_major_kernel(self):
        doc = {"M": 1, "states": [[0.9], [0.2]], "kernel": [0.5, 0.5, 0.5, 0.5]}
        spec = cw.spec_from_json(json.dumps(doc))
        assert spec.kernel.shape == (2, 2)

    def test_height_mismatch_rejected(self):
        doc = {"M": 2, "states": [[0.9]], "kernel": [[1.0]]}
        with pytest.raises(BadParams):
            cw.spec_from_json(json.dumps(doc))
