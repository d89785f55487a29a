import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtr
from scipy.stats import norm

from ebshrink import (
    MixturePrior,
    Observation,
    PriorComponent,
    fsp,
    fsr_hat,
    lfsr_rank1_closed_form,
    marginal_log_likelihood,
    negprob_eigen_decomposed,
    negprob_fullrank_closed_form,
    posterior_stats,
    posterior_summary,
    reject_at_level,
    s_values,
    threshold_lfsr,
)
from ebshrink.errors import (
    DegenerateCondition,
    DimensionMismatch,
    EmptySet,
    NotUnitVector,
)

from util import random_pd, random_psd, random_unit


def single(u, d=None):
    return MixturePrior((PriorComponent(1.0, u, d),))


def obs(x, v=None):
    x = np.asarray(x, dtype=float)
    return Observation(x, np.eye(x.size) if v is None else v)


class TestMarginalLogLikelihood:
    def test_scalar_standard_normal(self):
        prior = single(np.zeros((1, 1)))
        ll = marginal_log_likelihood([obs([0.0], np.eye(1))], prior)
        assert ll == pytest.approx(-0.9189385332046727, abs=1e-14)

    def test_scalar_two_component_mixture(self):
        comps = (
            PriorComponent(0.5, np.zeros((1, 1))),
            PriorComponent(0.5, np.ones((1, 1))),
        )
        ll = marginal_log_likelihood([obs([1.0])], MixturePrior(comps))
        # frozen from 0.5 * N(1; 0, 1) + 0.5 * N(1; 0, 2)
        assert ll == pytest.approx(-1.4660599738062792, abs=1e-12)

    def test_matches_dense_quadratic_form(self):
        rng = np.random.default_rng(11)
        u = random_psd(rng, 2)
        v = random_pd(rng, 2)
        x = rng.standard_normal(2)
        t = u + v
        expected = -0.5 * (
            2 * np.log(2 * np.pi) + np.log(np.linalg.det(t)) + x @ np.linalg.solve(t, x)
        )
        got = marginal_log_likelihood([Observation(x, v)], single(u))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_additive_over_observations(self):
        rng = np.random.default_rng(12)
        prior = single(random_psd(rng, 3))
        data = [obs(rng.standard_normal(3)) for _ in range(4)]
        total = marginal_log_likelihood(data, prior)
        parts = sum(marginal_log_likelihood([o], prior) for o in data)
        assert total == pytest.approx(parts, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            marginal_log_likelihood([obs([0.0, 0.0])], single(np.eye(3)))


class TestPosteriorSummary:
    def test_rank1_posterior_moments(self):
        # known unit-direction prior: posterior mean and covariance halve
        u = np.array([1.0, 1.0, 0.01, 0.01, 0.01])
        u = u / np.linalg.norm(u)
        rng = np.random.default_rng(13)
        x = rng.standard_normal(5)
        summary = posterior_summary(obs(x), single(np.outer(u, u)))
        np.testing.assert_allclose(summary.mean, 0.5 * np.outer(u, u) @ x, atol=1e-12)
        np.testing.assert_allclose(summary.comp_covs[0], 0.5 * np.outer(u, u), atol=1e-12)

    def test_zero_observation_gives_half(self):
        rng = np.random.default_rng(14)
        prior = single(random_psd(rng, 4))
        summary = posterior_summary(obs(np.zeros(4)), prior)
        np.testing.assert_allclose(summary.neg_prob, 0.5, atol=1e-14)
        np.testing.assert_allclose(summary.lfsr, 0.5, atol=1e-14)

    def test_neg_prob_matches_quadrature(self):
        rng = np.random.default_rng(15)
        comps = (
            PriorComponent(0.4, random_psd(rng, 2)),
            PriorComponent(0.6, random_psd(rng, 2)),
        )
        prior = MixturePrior(comps)
        x = rng.standard_normal(2) * 1.5
        summary = posterior_summary(obs(x), prior)
        for r in range(2):
            means = summary.comp_means[:, r]
            sds = np.sqrt(np.maximum(summary.comp_covs[:, r, r], 1e-300))
            weights = summary.comp_weights

            def density(t):
                return float(np.sum(weights * norm.pdf(t, means, sds)))

            target, _ = quad(density, -np.inf, 0.0, limit=200)
            assert summary.neg_prob[r] == pytest.approx(target, abs=1e-8)

    def test_effective_covariance_includes_diagonal(self):
        u = np.zeros((2, 2))
        d = np.array([1.0, 4.0])
        summary = posterior_summary(obs([1.0, 1.0]), single(u, d))
        np.testing.assert_allclose(summary.mean, [0.5, 0.8], atol=1e-12)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(16)
        prior = MixturePrior(
            (PriorComponent(0.3, random_psd(rng, 3)), PriorComponent(0.7, random_psd(rng, 3)))
        )
        data = [obs(rng.standard_normal(3)) for _ in range(6)]
        stats = posterior_stats(data, prior)
        for i, o in enumerate(data):
            summary = posterior_summary(o, prior)
            np.testing.assert_allclose(stats.mean[i], summary.mean, atol=1e-12)
            np.testing.assert_allclose(stats.lfsr[i], summary.lfsr, atol=1e-12)


class TestClosedForms:
    def test_rank1_zero_projection(self):
        u = random_unit(np.random.default_rng(17), 4)
        x = np.zeros(4)
        assert lfsr_rank1_closed_form(x, u, 1.0) == pytest.approx(0.5)

    def test_rank1_frozen_value(self):
        # lambda = 1, |u.x| = 2
        u = np.array([1.0, 0.0])
        x = np.array([2.0, 5.0])
        got = lfsr_rank1_closed_form(x, u, 1.0)
        assert got == pytest.approx(0.0786496035251425, abs=1e-14)

    def test_rank1_requires_unit_vector(self):
        with pytest.raises(NotUnitVector):
            lfsr_rank1_closed_form(np.ones(2), np.ones(2), 1.0)
        with pytest.raises(ValueError):
            lfsr_rank1_closed_form(np.ones(2), np.array([1.0, 0.0]), 0.0)

    def test_rank1_shared_across_conditions(self):
        rng = np.random.default_rng(18)
        for _ in range(100):
            r = int(rng.integers(2, 6))
            u = random_unit(rng, r)
            lam = float(rng.uniform(0.1, 5.0))
            x = rng.standard_normal(r) * 2
            closed = lfsr_rank1_closed_form(x, u, lam)
            summary = posterior_summary(obs(x), single(lam * np.outer(u, u)))
            np.testing.assert_allclose(summary.lfsr, closed, atol=1e-10)

    def test_fullrank_reduces_to_rank1_at_zero(self):
        rng = np.random.default_rng(19)
        u = random_unit(rng, 5)
        x = rng.standard_normal(5)
        for r in range(5):
            got = negprob_fullrank_closed_form(x, u, 0.0, r)
            expected = ndtr(-np.sqrt(0.5) * np.sign(u[r]) * (u @ x))
            assert got == pytest.approx(expected, abs=1e-14)

    def test_fullrank_zero_observation(self):
        u = random_unit(np.random.default_rng(20), 3)
        for r in range(3):
            assert negprob_fullrank_closed_form(np.zeros(3), u, 0.1, r) == pytest.approx(0.5)

    def test_fullrank_matches_general_path(self):
        u = np.array([1.0, 1.0, 0.01, 0.01, 0.01])
        u = u / np.linalg.norm(u)
        rng = np.random.default_rng(21)
        x = rng.standard_normal(5) * 1.5
        prior = single(np.outer(u, u) + 0.03 * np.eye(5))
        summary = posterior_summary(obs(x), prior)
        for r in range(5):
            got = negprob_fullrank_closed_form(x, u, 0.03, r)
            assert got == pytest.approx(summary.neg_prob[r], abs=1e-10)

    def test_eigen_decomposed_rank1_case(self):
        rng = np.random.default_rng(22)
        u = random_unit(rng, 4)
        x = rng.standard_normal(4)
        for r in range(4):
            got = negprob_eigen_decomposed(x, np.outer(u, u), r)
            expected = ndtr(-np.sqrt(0.5) * np.sign(u[r]) * (u @ x))
            assert got == pytest.approx(expected, abs=1e-12)

    def test_eigen_decomposed_hand_case(self):
        # diag(1, 2) prior, x = (1, -1): condition 0 gives Phi(-sqrt(1/2))
        got = negprob_eigen_decomposed(np.array([1.0, -1.0]), np.diag([1.0, 2.0]), 0)
        assert got == pytest.approx(0.23975006109347669, abs=1e-14)

    def test_eigen_decomposed_matches_general_path(self):
        rng = np.random.default_rng(23)
        u = random_psd(rng, 5)
        x = rng.standard_normal(5)
        summary = posterior_summary(obs(x), single(u))
        for r in range(5):
            got = negprob_eigen_decomposed(x, u, r)
            assert got == pytest.approx(summary.neg_prob[r], abs=1e-10)

    def test_eigen_decomposed_degenerate_condition(self):
        u = np.zeros((2, 2))
        u[0, 0] = 1.0
        with pytest.raises(DegenerateCondition):
            negprob_eigen_decomposed(np.ones(2), u, 1)


class TestSelection:
    def test_fsr_hat_mean(self):
        assert fsr_hat([0.1, 0.2, 0.3], [0, 1, 2]) == pytest.approx(0.2)
        assert fsr_hat([0.1, 0.2, 0.3], [1]) == pytest.approx(0.2)

    def test_fsr_hat_random_subset(self):
        rng = np.random.default_rng(24)
        values = rng.uniform(0, 0.5, 100)
        idx = rng.choice(100, 17, replace=False)
        assert fsr_hat(values, idx) == pytest.approx(values[idx].mean(), abs=1e-14)

    def test_fsr_hat_empty(self):
        with pytest.raises(EmptySet):
            fsr_hat([0.1], [])

    def test_s_values_running_means(self):
        np.testing.assert_allclose(s_values([0.1, 0.2, 0.3]), [0.1, 0.15, 0.2])

    def test_s_values_all_equal(self):
        np.testing.assert_allclose(s_values([0.3, 0.3, 0.3]), 0.3)

    def test_s_values_bruteforce_with_ties(self):
        rng = np.random.default_rng(25)
        values = np.round(rng.uniform(0, 0.5, 60), 2)  # quantized to force ties
        got = s_values(values)
        for j, v in enumerate(values):
            members = values[values <= v]
            assert got[j] == pytest.approx(members.mean(), abs=1e-13)

    def test_s_values_properties(self):
        rng = np.random.default_rng(26)
        values = rng.uniform(0, 0.5, 200)
        s = s_values(values)
        assert np.all(s <= values + 1e-15)
        order = np.argsort(values)
        assert np.all(np.diff(s[order]) >= -1e-15)

    def test_reject_trivial_cases(self):
        lfsr = np.full((3, 2), 0.4)
        means = np.ones((3, 2))
        assert reject_at_level(lfsr, means, 0.05).size == 0
        assert reject_at_level(lfsr, means, 0.5).size == 6

    def test_reject_matches_prefix_oracle(self):
        rng = np.random.default_rng(27)
        lfsr = rng.uniform(0, 0.5, (20, 4))
        means = rng.standard_normal((20, 4))
        alpha = 0.1
        got = reject_at_level(lfsr, means, alpha)
        # oracle: largest prefix of sorted lfsr whose running mean stays below alpha
        flat = np.sort(lfsr.ravel())
        running = np.cumsum(flat) / np.arange(1, flat.size + 1)
        keep = np.nonzero(running <= alpha)[0]
        expected_cut = flat[keep[-1]] if keep.size else -1.0
        expected = {(i, r) for i in range(20) for r in range(4) if lfsr[i, r] <= expected_cut}
        assert {tuple(p) for p in got.indices} == expected

    def test_reject_fsr_hat_bounded(self):
        rng = np.random.default_rng(28)
        for _ in range(25):
            lfsr = rng.uniform(0, 0.5, (15, 3))
            means = rng.standard_normal((15, 3))
            alpha = float(rng.uniform(0.02, 0.4))
            decisions = reject_at_level(lfsr, means, alpha)
            if decisions.size:
                members = lfsr[decisions.indices[:, 0], decisions.indices[:, 1]]
                assert members.mean() <= alpha + 1e-12

    def test_threshold_lfsr_rule(self):
        lfsr = np.array([[0.01, 0.2], [0.4, 0.05]])
        means = np.array([[1.0, -1.0], [1.0, -2.0]])
        got = threshold_lfsr(lfsr, means, 0.1)
        assert {tuple(p) for p in got.indices} == {(0, 0), (1, 1)}
        np.testing.assert_array_equal(got.estimated_signs, [1, -1])

    def test_fsp_counts_sign_errors(self):
        lfsr = np.full((2, 5), 0.01)
        means = np.ones((2, 5))
        decisions = reject_at_level(lfsr, means, 0.2)
        truth = np.ones((2, 5))
        assert fsp(decisions, truth) == 0.0
        assert fsp(decisions, -truth) == 1.0
        half = np.ones((2, 5))
        half[0] = -1.0
        assert fsp(decisions, half) == 0.5

    def test_fsp_zero_truth_counts_as_error(self):
        lfsr = np.full((1, 2), 0.01)
        means = np.ones((1, 2))
        decisions = reject_at_level(lfsr, means, 0.2)
        assert fsp(decisions, np.zeros((1, 2))) == 1.0

    def test_fsp_empty(self):
        decisions = reject_at_level(np.full((2, 2), 0.45), np.ones((2, 2)), 0.05)
        with pytest.raises(EmptySet):
            fsp(decisions, np.ones((2, 2)))


class TestInvariants:
    def test_lfsr_range(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            r = int(rng.integers(1, 5))
            k = int(rng.integers(1, 4))
            w = rng.dirichlet(np.ones(k))
            comps = tuple(PriorComponent(w[j], random_psd(rng, r)) for j in range(k))
            prior = MixturePrior(comps)
            data = [obs(rng.standard_normal(r) * 2) for _ in range(5)]
            stats = posterior_stats(data, prior)
            assert np.all(stats.lfsr >= 0.0)
            assert np.all(stats.lfsr <= 0.5)

    def test_eigen_decomposed_agrees_over_ranks(self):
        rng = np.random.default_rng(30)
        for _ in range(100):
            r = int(rng.integers(2, 6))
            rank = int(rng.integers(1, r + 1))
            u = random_psd(rng, r, rank=rank)
            x = rng.standard_normal(r)
            summary = posterior_summary(obs(x), single(u))
            for cond in range(r):
                got = negprob_eigen_decomposed(x, u, cond)
                assert got == pytest.approx(summary.neg_prob[cond], abs=1e-10)

    def test_sign_consistency_with_neg_prob(self):
        rng = np.random.default_rng(31)
        for _ in range(30):
            prior = single(random_pd(rng, 3))
            x = rng.standard_normal(3) * 2
            summary = posterior_summary(obs(x), prior)
            for r in range(3):
                if summary.mean[r] != 0.0:
                    assert (summary.mean[r] > 0) == (summary.neg_prob[r] < 0.5)

    def test_estimated_lfsr_overestimates_on_average(self):
        # estimation noise in the direction biases the estimated lfsr upward
        rng = np.random.default_rng(32)
        n = 100
        r = 5
        u = random_unit(rng, r)
        x = rng.standard_normal(r) * 2
        if u @ x > 0:
            x = -x
        true_lfsr = float(ndtr(np.sqrt(0.5) * (u @ x)))
        draws = 100_000
        eps = rng.standard_normal((draws, r)) / np.sqrt(n)
        hat = ndtr(np.sqrt(0.5) * ((u + eps) @ x))
        se = hat.std(ddof=1) / np.sqrt(draws)
        assert hat.mean() >= true_lfsr - 2 * se
