import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_psd_model
from ccbudget.gaussian_select import (
    GaussianModel,
    MeanEstimator,
    SingularBlock,
    SubsetSelection,
    TooFewRows,
    TooLarge,
    cond_var_of_mean,
    conditional_moments,
    estimate_mean_utility,
    exhaustive_select,
    first_pick_closed_form,
    fit_gaussian,
    greedy_select,
    selection_trajectory,
)
from ccbudget.utility import UtilityMatrix


def oracle_cond_var(sigma: np.ndarray, S) -> float:
    """Var(mean | u_S) via an explicit inverse, independent of the Cholesky path."""
    M = sigma.shape[0]
    S = list(S)
    U = [j for j in range(M) if j not in S]
    if not S:
        return sigma.sum() / M**2
    if not U:
        return 0.0
    inv = np.linalg.inv(sigma[np.ix_(S, S)])
    cond = sigma[np.ix_(U, U)] - sigma[np.ix_(U, S)] @ inv @ sigma[np.ix_(S, U)]
    return cond.sum() / M**2


class TestFitGaussian:
    def test_identical_rows(self):
        pilot = np.tile([0.3, -0.1, 0.2], (5, 1))
        m = fit_gaussian(pilot)
        np.testing.assert_allclose(m.mu, [0.3, -0.1, 0.2])
        assert m.ridge > 0
        np.testing.assert_allclose(m.sigma, m.ridge * np.eye(3))

    def test_hand_covariance(self):
        m = fit_gaussian(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
        np.testing.assert_allclose(m.mu, [1.0, 1.0])
        # rank-one sample covariance needs the ridge to become positive definite
        np.testing.assert_allclose(m.sigma, np.ones((2, 2)) + m.ridge * np.eye(2), atol=1e-15)
        assert 0 < m.ridge < 1e-5
        np.linalg.cholesky(m.sigma)

    def test_monte_carlo_recovers_covariance(self):
        rng = np.random.default_rng(11)
        true = random_psd_model(rng, 4)
        L = 10_000
        draws = rng.multivariate_normal(true.mu, true.sigma, size=L)
        m = fit_gaussian(draws)
        d = np.diag(true.sigma)
        # stderr of a sample covariance entry: sqrt((s_ii s_jj + s_ij^2) / L)
        stderr = np.sqrt((np.outer(d, d) + true.sigma**2) / L)
        assert np.all(np.abs(m.sigma - true.sigma) < 5 * stderr)

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            fit_gaussian(np.zeros((1, 3)))

    def test_masked_pilot_rejected(self):
        pilot = UtilityMatrix(["a", "b"], ["x"], np.array([[1.0], [np.nan]]))
        with pytest.raises(ValueError):
            fit_gaussian(pilot)

    def test_json_round_trip_exact(self):
        m = random_psd_model(np.random.default_rng(2), 5)
        back = GaussianModel.from_json(m.to_json())
        assert np.array_equal(back.mu, m.mu) and np.array_equal(back.sigma, m.sigma)
        assert set(json.loads(m.to_json())) == {"M", "mu", "sigma", "ridge"}

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            GaussianModel(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))


class TestConditionalMoments:
    def test_two_by_two_closed_form(self):
        m = GaussianModel(np.zeros(2), np.array([[4.0, 2.0], [2.0, 4.0]]))
        c = conditional_moments(m, [0], [2.0])
        np.testing.assert_allclose(c.mu_cond, [1.0])
        np.testing.assert_allclose(c.sigma_cond, [[3.0]])

    def test_independent_blocks(self):
        m = GaussianModel(np.array([1.0, 2.0, 3.0]), np.diag([1.0, 2.0, 3.0]))
        c = conditional_moments(m, [0], [100.0])
        np.testing.assert_allclose(c.mu_cond, [2.0, 3.0])

    def test_zero_innovation(self):
        m = random_psd_model(np.random.default_rng(4), 6)
        c = conditional_moments(m, [1, 4], m.mu[[1, 4]])
        np.testing.assert_allclose(c.mu_cond, m.mu[[0, 2, 3, 5]], atol=1e-12)

    def test_matches_explicit_inverse(self):
        rng = np.random.default_rng(5)
        m = random_psd_model(rng, 7)
        S, U = [5, 1, 3], [0, 2, 4, 6]
        u = rng.standard_normal(3)
        c = conditional_moments(m, S, u)
        inv = np.linalg.inv(m.sigma[np.ix_(S, S)])
        mu = m.mu[U] + m.sigma[np.ix_(U, S)] @ inv @ (u - m.mu[S])
        np.testing.assert_allclose(c.mu_cond, mu, rtol=1e-9, atol=1e-12)

    def test_sigma_cond_symmetric_psd(self):
        for seed in range(20):
            m = random_psd_model(np.random.default_rng(seed), 8, rank=3)
            c = conditional_moments(m, [0, 2], m.mu[[0, 2]])
            np.testing.assert_array_equal(c.sigma_cond, c.sigma_cond.T)
            tol = 1e-8 * np.trace(m.sigma) / m.M
            assert np.linalg.eigvalsh(c.sigma_cond).min() >= -tol

    def test_singular_block(self):
        # rank-one blocks are rescued by jitter; an indefinite block is not
        sigma = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        m = GaussianModel(np.zeros(3), sigma)
        with pytest.raises(SingularBlock):
            conditional_moments(m, [0, 1], [0.0, 0.0])
        ok = GaussianModel(np.zeros(3), np.ones((3, 3)))
        c = conditional_moments(ok, [0, 1], [1.0, 1.0])
        assert c.mu_cond[0] == pytest.approx(1.0, abs=1e-6)

    def test_invalid_subsets(self):
        m = random_psd_model(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            conditional_moments(m, [], [])
        with pytest.raises(ValueError):
            conditional_moments(m, [0, 0], [1.0, 1.0])
        with pytest.raises(IndexError):
            conditional_moments(m, [3], [1.0])


class TestCondVarOfMean:
    def test_empty_and_full(self):
        m = random_psd_model(np.random.default_rng(1), 5)
        assert cond_var_of_mean(m, []) == pytest.approx(m.sigma.sum() / 25)
        assert cond_var_of_mean(m, range(5)) == 0.0

    def test_two_independent(self):
        m = GaussianModel(np.zeros(2), np.diag([3.0, 5.0]))
        assert cond_var_of_mean(m, [0]) == pytest.approx(5.0 / 4)

    def test_singular_block_uses_generalized_inverse(self):
        # rank 2 with no ridge: observing both generators explains everything
        rng = np.random.default_rng(5)
        a = rng.standard_normal((6, 2))
        m = GaussianModel(np.zeros(6), a @ a.T)
        assert cond_var_of_mean(m, [0, 1, 2]) == pytest.approx(0.0, abs=1e-12)
        low_rank_first = cond_var_of_mean(m, [0])
        expected = oracle_cond_var(m.sigma + 1e-12 * np.eye(6), [0])
        assert low_rank_first == pytest.approx(expected, rel=1e-6)

    def test_nested_subsets_never_increase_for_singular_models(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            m = random_psd_model(rng, 9, rank=int(rng.integers(1, 9)), ridge=0.0)
            order = list(rng.permutation(9))
            vals = [cond_var_of_mean(m, order[:t]) for t in range(10)]
            assert np.all(np.diff(vals) <= 1e-12 * vals[0])

    def test_perfectly_correlated_pair(self):
        m = fit_gaussian(np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, -1.0], [2.0, 2.0]]))
        # zero up to the ridge
        assert cond_var_of_mean(m, [0]) < 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = random_psd_model(rng, 6)
        for K in range(0, 7):
            S = list(rng.choice(6, size=K, replace=False))
            assert cond_var_of_mean(m, S) == pytest.approx(oracle_cond_var(m.sigma, S), rel=1e-8, abs=1e-14)


class TestGreedySelect:
    def test_independent_descending_variance(self):
        var = np.array([1.0, 5.0, 3.0, 0.5, 4.0])
        m = GaussianModel(np.zeros(5), np.diag(var))
        sel = greedy_select(m, 5)
        assert sel.order == [1, 4, 2, 0, 3]

    def test_correlated_pair_and_independent(self):
        # 0 and 1 perfectly correlated (up to ridge), 2 independent with high variance
        sigma = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 9.0]]) + 1e-9 * np.eye(3)
        m = GaussianModel(np.zeros(3), sigma)
        order = greedy_select(m, 2).order
        assert 2 in order and set(order) != {0, 1}
        best = exhaustive_select(m, 2)
        assert set(best.subset) == set(order)

    @pytest.mark.parametrize("seed", range(15))
    def test_naive_and_incremental_agree(self, seed):
        m = random_psd_model(np.random.default_rng(seed), 12)
        a = greedy_select(m, 8, "incremental")
        b = greedy_select(m, 8, "naive")
        assert a.order == b.order
        np.testing.assert_allclose(a.cond_var_trajectory, b.cond_var_trajectory, rtol=1e-7, atol=1e-12)

    def test_trajectory_shape_and_order(self):
        m = random_psd_model(np.random.default_rng(8), 9)
        sel = greedy_select(m, 8)
        t = sel.cond_var_trajectory
        assert len(t) == 9 and len(set(sel.order)) == 8
        assert all(b <= a + 1e-12 * t[0] for a, b in zip(t, t[1:]))
        assert min(t) >= 0
        assert t[0] == pytest.approx(m.scale_reference())
        np.testing.assert_allclose(t, selection_trajectory(m, sel.order), rtol=1e-7, atol=1e-14)

    def test_full_selection_ends_at_zero(self):
        m = random_psd_model(np.random.default_rng(9), 4)
        assert greedy_select(m, 4).cond_var_trajectory[-1] == 0.0

    def test_invalid_k(self):
        m = random_psd_model(np.random.default_rng(0), 3)
        for K in (0, 4):
            with pytest.raises(ValueError):
                greedy_select(m, K)
        with pytest.raises(ValueError):
            greedy_select(m, 1, method="magic")

    def test_scale_equivariance(self):
        m = random_psd_model(np.random.default_rng(12), 10)
        scaled = GaussianModel(m.mu * 3, m.sigma * 9)
        a, b = greedy_select(m, 5), greedy_select(scaled, 5)
        assert a.order == b.order
        np.testing.assert_allclose(np.array(b.cond_var_trajectory), 9 * np.array(a.cond_var_trajectory), rtol=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        m = random_psd_model(rng, 10)
        perm = rng.permutation(10)
        pm = GaussianModel(m.mu[perm], m.sigma[np.ix_(perm, perm)])
        a, b = greedy_select(m, 6), greedy_select(pm, 6)
        # index perm[i] of the original sits at position i of the permuted model
        assert [int(perm[i]) for i in b.order] == a.order

    def test_selection_json(self):
        sel = greedy_select(random_psd_model(np.random.default_rng(1), 5), 3)
        back = SubsetSelection.from_dict(json.loads(sel.to_json()))
        assert back.order == sel.order and back.method == "greedy"


class TestFirstPick:
    def test_independent_is_max_variance(self):
        m = GaussianModel(np.zeros(4), np.diag([2.0, 7.0, 7.5, 1.0]))
        assert first_pick_closed_form(m) == 2

    def test_exchangeable_tie_goes_to_zero(self):
        sigma = np.full((5, 5), 0.3) + 0.7 * np.eye(5)
        assert first_pick_closed_form(GaussianModel(np.zeros(5), sigma)) == 0
        assert greedy_select(GaussianModel(np.zeros(5), sigma), 1).order == [0]

    @pytest.mark.parametrize("seed", range(100))
    def test_equals_greedy_first(self, seed):
        rng = np.random.default_rng(1000 + seed)
        m = random_psd_model(rng, int(rng.integers(2, 15)))
        assert first_pick_closed_form(m) == greedy_select(m, 1).order[0]


class TestExhaustive:
    def test_independent_top_two(self):
        m = GaussianModel(np.zeros(6), np.diag([1.0, 6.0, 2.0, 5.0, 3.0, 0.1]))
        assert set(exhaustive_select(m, 2).subset) == {1, 3}

    def test_greedy_ratio(self):
        m = random_psd_model(np.random.default_rng(21), 8)
        g = cond_var_of_mean(m, greedy_select(m, 3).order)
        e = exhaustive_select(m, 3)
        ratio = g / e.cond_var
        assert np.isfinite(ratio) and ratio >= 1 - 1e-9

    def test_leave_one_out(self):
        m = random_psd_model(np.random.default_rng(22), 5)
        best = exhaustive_select(m, 4)
        values = {j: oracle_cond_var(m.sigma, [i for i in range(5) if i != j]) for j in range(5)}
        omit = min(values, key=values.get)
        assert set(best.subset) == set(range(5)) - {omit}

    def test_matches_enumeration_oracle(self):
        m = random_psd_model(np.random.default_rng(23), 6)
        best = exhaustive_select(m, 3)
        oracle = min(itertools.combinations(range(6), 3), key=lambda S: oracle_cond_var(m.sigma, S))
        assert set(best.subset) == set(oracle)
        assert best.evaluated == 20

    def test_too_large(self):
        m = GaussianModel(np.zeros(40), np.eye(40))
        with pytest.raises(TooLarge):
            exhaustive_select(m, 20)


class TestEstimator:
    def test_full_set_is_exact_mean(self):
        rng = np.random.default_rng(3)
        m = random_psd_model(rng, 6)
        u = rng.standard_normal(6)
        assert estimate_mean_utility(m, range(6), u) == pytest.approx(u.mean(), abs=1e-12)

    def test_independent(self):
        m = GaussianModel(np.array([0.1, 0.2, 0.3, 0.4]), np.diag([1.0, 2.0, 3.0, 4.0]))
        u = [5.0, -1.0]
        assert estimate_mean_utility(m, [0, 2], u) == pytest.approx((5.0 - 1.0 + 0.2 + 0.4) / 4)

    def test_mean_estimator_matches(self):
        rng = np.random.default_rng(6)
        m = random_psd_model(rng, 9)
        S = [7, 2, 4]
        est = MeanEstimator(m, S)
        U = rng.standard_normal((20, 3))
        direct = [estimate_mean_utility(m, S, row) for row in U]
        np.testing.assert_allclose(est.many(U), direct, rtol=1e-10, atol=1e-12)
        assert est(U[0]) == pytest.approx(direct[0], abs=1e-12)

    def test_empty_subset_is_prior_mean(self):
        m = random_psd_model(np.random.default_rng(7), 4)
        assert MeanEstimator(m, [])(np.zeros(0)) == pytest.approx(m.mu.mean())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_monotone_information(seed, M):
    rng = np.random.default_rng(seed)
    m = random_psd_model(rng, M, rank=int(rng.integers(1, M + 1)))
    order = rng.permutation(M)
    scale = m.scale_reference()
    prev = cond_var_of_mean(m, [])
    for t in range(1, M + 1):
        cur = cond_var_of_mean(m, list(order[:t]))
        assert cur <= prev + 1e-9 * scale
        prev = cur
