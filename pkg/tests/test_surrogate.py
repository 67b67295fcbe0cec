import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import counterexample_sigma, cov_pair, dense_bordered_logdet, mean_pair, random_spd
from sparsesense.errors import EvaluationError, NumericalError, ParameterError
from sparsesense.linmodel import GaussianPair, bhattacharyya, kl_divergence, shift_decompose, snr
from sparsesense.setfunc import empirical_epsilon, greedy_maximize, min_marginal_gain
from sparsesense.surrogate import (
    TraceFunction,
    advance,
    bhattacharyya_decomposition,
    commit,
    jdiv_sub,
    kl_decomposition,
    kl_sub_decomposition,
    logdet_surrogate,
    surrogate_greedy,
    symmetric_sqrt,
    trace_surrogate,
)


class TestLogdetSurrogate:
    def test_empty_is_zero(self, rng):
        assert logdet_surrogate(mean_pair(rng, 4))([]) == 0.0

    def test_dense_oracle(self, rng):
        p = mean_pair(rng, 7)
        d = shift_decompose(p.sigma0)
        f = logdet_surrogate(p, d)
        A = [1, 4, 6]
        assert f.raw(A) == pytest.approx(dense_bordered_logdet(p.sigma0, d.a, p.theta, A), rel=1e-10)
        assert f(A) == pytest.approx(f.raw(A) - f.offset, rel=1e-12)

    def test_product_identity(self, rng):
        p = mean_pair(rng, 6)
        f = logdet_surrogate(p)
        for A in ([0], [2, 5], [1, 3, 4, 5]):
            assert math.exp(f.raw(A)) == pytest.approx(f.gamma(A) * snr(p, A), rel=1e-8)

    def test_counterexample_ordering(self):
        rho = 0.99
        p = GaussianPair.mean_shift(np.ones(3), counterexample_sigma(rho))
        f = logdet_surrogate(p)
        # equal |A| shares the -|A| log a term, so the sign follows the SNR gap after the gamma factor
        diff = f([0, 1]) - f([2, 0])
        assert diff == pytest.approx(math.log(f.gamma([0, 1]) * (2 + 2 * rho))
                                     - math.log(f.gamma([2, 0]) * (2 - rho**2)), rel=1e-10)
        assert diff > 0

    def test_literal_offset(self, rng):
        p = mean_pair(rng, 5)
        f = logdet_surrogate(p, offset=0.0)
        assert f([0, 2]) == pytest.approx(f.raw([0, 2]))

    def test_floor_is_tight(self, rng):
        # the floor is the largest offset keeping the function submodular: some pair meets it exactly
        p = mean_pair(rng, 5)
        f = logdet_surrogate(p)
        terms = [f([u]) + f([v]) - f([u, v]) for u in range(5) for v in range(u + 1, 5)]
        assert min(terms) == pytest.approx(0.0, abs=1e-9)

    def test_floor_single_sensor(self):
        p = GaussianPair.mean_shift(np.array([2.0]), np.array([[3.0]]))
        assert logdet_surrogate(p)([0]) == pytest.approx(0.0, abs=1e-12)

    def test_zero_snr_is_evaluation_error(self):
        p = GaussianPair.mean_shift(np.array([0.0, 1.0]), np.eye(2))
        f = logdet_surrogate(p)
        with pytest.raises(EvaluationError) as exc:
            f([0])
        assert exc.value.index == 0
        with pytest.raises(EvaluationError):
            f.probe((), [0, 1])

    def test_needs_common_covariance(self, rng):
        with pytest.raises(ParameterError):
            logdet_surrogate(cov_pair(rng, 3))

    def test_beta_does_not_change_greedy(self, rng):
        p = mean_pair(rng, 9)
        sels = {greedy_maximize(logdet_surrogate(p, shift_decompose(p.sigma0, b)), 4)[0].indices
                for b in (0.1, 0.5, 0.9)}
        assert len(sels) == 1

    def test_batch_and_probe_agree(self, rng):
        p = mean_pair(rng, 8)
        f = logdet_surrogate(p)
        idx = np.array([[0, 3, 5], [7, 1, 2]])
        np.testing.assert_allclose(f.batch(idx), [f(list(r)) for r in idx], rtol=1e-12)
        np.testing.assert_allclose(f.probe((0, 3), [5, 6]), [f([0, 3, 5]), f([0, 3, 6])], rtol=1e-12)


class TestRecursion:
    def test_base_case(self, rng):
        p = mean_pair(rng, 5)
        f = logdet_surrogate(p)
        st0 = f.state()
        for i in range(5):
            val, s = advance(st0, i)
            assert val == pytest.approx(f([i]), rel=1e-12, abs=1e-12)
            assert s == pytest.approx(snr(p, [i]), rel=1e-12)

    def test_chain_vs_dense(self, rng):
        p = mean_pair(rng, 20)
        f = logdet_surrogate(p, offset=0.0)
        state = f.state()
        for i in rng.choice(20, 6, replace=False):
            val, s = advance(state, i)
            state = commit(state, i)
            A = list(state.selection.indices)
            dense = dense_bordered_logdet(p.sigma0, f.decomp.a, p.theta, A)
            assert val == pytest.approx(dense, rel=1e-8)
            assert state.value == pytest.approx(val, rel=1e-12)
            assert s == pytest.approx(snr(p, A), rel=1e-8)
            assert state.snr_value == pytest.approx(s, rel=1e-12)
            eye = np.eye(len(A)) + f.decomp.s_matrix[np.ix_(A, A)] / f.decomp.a
            assert state.running_logdet == pytest.approx(np.linalg.slogdet(eye)[1], abs=1e-8)
            assert state.chol_factor.shape == (len(A), len(A))

    def test_probe_is_pure(self, rng):
        p = mean_pair(rng, 8)
        state = commit(commit(logdet_surrogate(p).state(), 3), 5)
        before = (state.chol_factor.copy(), state.running_logdet, state.snr_value)
        state.probe([0, 1, 2, 4, 6, 7])
        for i in (0, 1, 7):
            advance(state, i)
        np.testing.assert_array_equal(state.chol_factor, before[0])
        assert (state.running_logdet, state.snr_value) == before[1:]

    def test_commits_reproduce_greedy_trace(self, rng):
        p = mean_pair(rng, 12)
        f = logdet_surrogate(p)
        sel, trace = greedy_maximize(f, 5)
        state = f.state()
        for step in trace.steps:
            state = commit(state, step.index)
            assert state.value == pytest.approx(step.value, rel=1e-10, abs=1e-10)

    def test_duplicate_commit(self, rng):
        state = commit(logdet_surrogate(mean_pair(rng, 4)).state(), 1)
        with pytest.raises(ParameterError):
            commit(state, 1)
        with pytest.raises(ParameterError):
            advance(state, 1)

    def test_nonpositive_schur(self):
        sigma = np.eye(2)
        p = GaussianPair.mean_shift(np.ones(2), sigma)
        state = logdet_surrogate(p).state()
        # corrupt the scaled S so that I + S_A / a is indefinite on {0, 1}
        state._chain.s_scaled = np.array([[1.0, 3.0], [3.0, 1.0]])
        state = commit(state, 0)
        with pytest.raises(NumericalError):
            advance(state, 1)
        with pytest.raises(NumericalError):
            commit(state, 1)

    def test_probe_cost_quadratic(self, rng):
        p = mean_pair(rng, 40)
        state = logdet_surrogate(p).state()
        costs = []
        for k in range(12):
            cands = np.setdiff1d(np.arange(40), state.selection.as_array())
            costs.append(state.probe(cands).ops / cands.size)
            state = commit(state, int(cands[0]))
        ks = np.arange(12)
        np.testing.assert_array_equal(costs, ks * (ks + 1) // 2 + ks)


class TestDualGreedy:
    def test_records_both(self, rng):
        p = mean_pair(rng, 10)
        f = logdet_surrogate(p)
        res = surrogate_greedy(f, 4)
        assert res.surrogate.indices == greedy_maximize(f, 4)[0].indices
        from sparsesense.setfunc import SNRFunction

        assert res.snr_chain.indices == greedy_maximize(SNRFunction(p), 4)[0].indices
        assert res.surrogate_snr == pytest.approx(snr(p, list(res.surrogate)))
        assert snr(p, list(res.best)) == pytest.approx(max(res.surrogate_snr, res.chain_snr), rel=1e-12)


class TestTraceSurrogate:
    def test_scalar(self):
        sig2, pval, beta = 2.0, 3.0, 0.5
        q = trace_surrogate(np.array([[sig2]]), np.array([[pval]]), shift_decompose(np.array([[sig2]]), beta))
        a = beta * sig2
        s = sig2 - a
        assert q.raw([0]) == pytest.approx(math.log(1 / s + 1 / a) + math.log(pval / sig2), rel=1e-12)

    def test_trace_function_identity(self, rng):
        s = random_spd(rng, 5)
        q = TraceFunction(s, s)
        for A in ([0], [1, 3], [0, 2, 3, 4]):
            assert q(A) == pytest.approx(len(A), rel=1e-12)

    def test_dense_bordered(self, rng):
        s, psi = random_spd(rng, 5), random_spd(rng, 5)
        d = shift_decompose(s)
        q = trace_surrogate(s, psi, d)
        root = symmetric_sqrt(psi)
        np.testing.assert_allclose(root @ root, psi, atol=1e-12)
        A = [0, 2, 3]
        expect = sum(dense_bordered_logdet(s, d.a, root[:, i], A) for i in range(5))
        assert q.raw(A) == pytest.approx(expect, rel=1e-10)
        np.testing.assert_allclose(q.probe((0, 2), [3]), [q(A)], rtol=1e-12)

    def test_zero_quadratic_form(self):
        q = trace_surrogate(np.eye(2), np.eye(2))
        with pytest.raises(EvaluationError):
            q([0])


class TestDecompositions:
    def test_bhattacharyya_identical(self, rng):
        s = random_spd(rng, 4)
        dec = bhattacharyya_decomposition(GaussianPair.covariance_shift(s, s))
        for A in ([0], [1, 2], [0, 1, 2, 3]):
            assert dec.objective(A) == pytest.approx(0.0, abs=1e-12)

    def test_bhattacharyya_hand(self):
        dec = bhattacharyya_decomposition(GaussianPair.covariance_shift(np.eye(2), 2 * np.eye(2)))
        assert dec.objective([0, 1]) == pytest.approx(math.log(1.5) - 0.5 * math.log(2), rel=1e-13)

    def test_bhattacharyya_matches(self, rng):
        p = cov_pair(rng, 6)
        dec = bhattacharyya_decomposition(p)
        for _ in range(50):
            A = list(rng.choice(6, rng.integers(1, 7), replace=False))
            assert dec.objective(A) == pytest.approx(bhattacharyya(p, A), rel=1e-9, abs=1e-12)
        assert dec.g([]) == dec.h([]) == 0.0

    def test_needs_equal_means(self, rng):
        with pytest.raises(ParameterError):
            bhattacharyya_decomposition(GaussianPair(np.zeros(2), np.ones(2), np.eye(2), 2 * np.eye(2)))

    def test_kl_sub_identical_is_evaluable(self, rng):
        s = random_spd(rng, 4)
        dec = kl_sub_decomposition(GaussianPair.covariance_shift(s, s))
        assert math.isfinite(dec.objective([0, 2]))

    def test_kl_sub_parts_submodular(self, rng):
        dec = kl_sub_decomposition(cov_pair(rng, 6))
        assert empirical_epsilon(dec.g) <= 1e-9
        assert empirical_epsilon(dec.h) <= 1e-9

    def test_kl_direct_is_exact(self, rng):
        p = cov_pair(rng, 6)
        dec = kl_decomposition(p)
        for A in ([0], [1, 4], [0, 2, 3, 5]):
            assert dec.objective(A) == pytest.approx(kl_divergence(p, A), rel=1e-10)

    def test_jdiv_symmetric(self, rng):
        p = cov_pair(rng, 5)
        f, g = jdiv_sub(p), jdiv_sub(p.swapped())
        for A in ([0], [1, 3], [0, 2, 4]):
            assert f(A) == pytest.approx(g(A), rel=1e-12)

    def test_jdiv_definition(self, rng):
        p = cov_pair(rng, 5)
        q01 = trace_surrogate(p.sigma0, p.sigma1)
        q10 = trace_surrogate(p.sigma1, p.sigma0)
        A = [1, 2, 4]
        assert jdiv_sub(p)(A) == pytest.approx(0.5 * (q01(A) + q10(A)), rel=1e-12)

    def test_jdiv_submodular(self, rng):
        assert empirical_epsilon(jdiv_sub(cov_pair(rng, 6))) <= 1e-9


# ---------------------------------------------------------------------------
# properties

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, m=st.integers(1, 8))
def test_surrogate_monotone_submodular(seed, m):
    f = logdet_surrogate(mean_pair(np.random.default_rng(seed), m))
    assert empirical_epsilon(f) <= 1e-9
    assert min_marginal_gain(f) >= -1e-9


@settings(max_examples=30, deadline=None)
@given(seed=seeds, m=st.integers(1, 6))
def test_trace_surrogate_monotone_submodular(seed, m):
    rng = np.random.default_rng(seed)
    q = trace_surrogate(random_spd(rng, m), random_spd(rng, m))
    assert empirical_epsilon(q) <= 1e-9
    assert min_marginal_gain(q) >= -1e-9


@settings(max_examples=60, deadline=None)
@given(seed=seeds, m=st.integers(2, 30))
def test_recursion_matches_dense(seed, m):
    rng = np.random.default_rng(seed)
    p = mean_pair(rng, m)
    f = logdet_surrogate(p, offset=0.0)
    state = f.state()
    for i in rng.choice(m, min(m, 6), replace=False):
        val, _ = advance(state, i)
        state = commit(state, i)
        dense = dense_bordered_logdet(p.sigma0, f.decomp.a, p.theta, list(state.selection.indices))
        assert abs(val - dense) <= 1e-8 * max(1.0, abs(dense))


@settings(max_examples=40, deadline=None)
@given(seed=seeds, m=st.integers(1, 9))
def test_product_identity(seed, m):
    rng = np.random.default_rng(seed)
    p = mean_pair(rng, m)
    f = logdet_surrogate(p)
    A = list(rng.choice(m, rng.integers(1, m + 1), replace=False))
    assert math.exp(f.raw(A)) == pytest.approx(f.gamma(A) * snr(p, A), rel=1e-8)
