import numpy as np
import pytest

from ebshrink import (
    EmConfig,
    MixturePrior,
    Observation,
    PriorComponent,
    em_fit,
    em_fit_rank_constrained,
    marginal_log_likelihood,
    psd_project,
    refit_weights,
    sigma2_mle_isotropic,
)
from ebshrink.errors import DegenerateComponent, DimensionTooSmall

from util import random_pd, random_psd


def identity_data(x):
    r = x.shape[1]
    return [Observation(row, np.eye(r)) for row in x]


def draw(rng, n, cov, noise=None):
    r = cov.shape[0]
    mu = rng.standard_normal((n, r)) @ np.linalg.cholesky(cov + 1e-12 * np.eye(r)).T
    if noise is None:
        return mu + rng.standard_normal((n, r))
    return mu + rng.standard_normal((n, r)) @ np.linalg.cholesky(noise).T


class TestEmFit:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(40)
        x = draw(rng, 600, np.array([[2.0, 0.5], [0.5, 1.5]]))
        prior, trace = em_fit(identity_data(x), 1, EmConfig(seed=1))
        target = psd_project(x.T @ x / 600 - np.eye(2))
        assert np.max(np.abs(prior.components[0].u - target)) <= 1e-8

    def test_k1_consistency(self):
        rng = np.random.default_rng(41)
        x = draw(rng, 5000, 2.0 * np.eye(2))
        prior, _ = em_fit(identity_data(x), 1, EmConfig(seed=2))
        assert np.max(np.abs(prior.components[0].u - 2.0 * np.eye(2))) <= 0.15

    def test_separated_mixture_responsibilities(self):
        # strong separation makes nearly every assignment confident; the
        # moderate-scale variant of this mixture leaves a large ambiguous
        # mass of small effects, so the scale here is deliberately large
        rng = np.random.default_rng(42)
        u1 = np.array([1.0, 1.0, 0.01, 0.01, 0.01])
        u2 = np.array([1.0, -1.0, 1.0, 0.01, 0.01])
        scale = 600.0
        labels = rng.integers(0, 2, 800)
        z = rng.standard_normal(800)
        mu = np.where(labels[:, None] == 0, np.outer(z, u1), np.outer(z, u2)) * np.sqrt(scale)
        x = mu + rng.standard_normal((800, 5))
        prior, trace = em_fit(identity_data(x), 2, EmConfig(seed=3, rank_constraints=(1, 1)))
        confident = np.mean(trace.responsibilities.max(axis=1) > 0.9)
        assert confident > 0.9

    def test_trace_invariants(self):
        rng = np.random.default_rng(43)
        x = draw(rng, 300, random_psd(rng, 3))
        _, trace = em_fit(identity_data(x), 2, EmConfig(seed=4))
        np.testing.assert_allclose(trace.responsibilities.sum(axis=1), 1.0, atol=1e-10)
        assert trace.effective_sizes.sum() == pytest.approx(300, abs=1e-8)
        assert np.all(np.diff(trace.loglik_per_iter) > -1e-8)

    def test_fitted_prior_is_valid(self):
        rng = np.random.default_rng(44)
        x = draw(rng, 200, random_psd(rng, 3))
        prior, _ = em_fit(identity_data(x), 2, EmConfig(seed=5))
        assert prior.weights.sum() == pytest.approx(1.0, abs=1e-12)
        for comp in prior.components:
            assert np.linalg.eigvalsh(comp.u)[0] >= -1e-8
            assert np.all(comp.d == 0.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(45)
        x = draw(rng, 400, random_psd(rng, 3))
        data = identity_data(x)
        inits = (random_pd(rng, 3), random_pd(rng, 3))
        cfg = EmConfig(init="user_supplied", init_components=inits)
        cfg_swapped = EmConfig(init="user_supplied", init_components=inits[::-1])
        _, trace_a = em_fit(data, 2, cfg)
        _, trace_b = em_fit(data, 2, cfg_swapped)
        assert trace_a.loglik_per_iter[-1] == pytest.approx(trace_b.loglik_per_iter[-1], abs=1e-6)

    def test_degenerate_component_detected(self):
        rng = np.random.default_rng(46)
        x = rng.standard_normal((100, 5))
        inits = (np.eye(5), 1e8 * np.eye(5))
        with pytest.raises(DegenerateComponent):
            em_fit(identity_data(x), 2, EmConfig(init="user_supplied", init_components=inits))

    def test_monotone_loglik_varying_noise(self):
        rng = np.random.default_rng(47)
        cov = random_psd(rng, 3)
        data = []
        for _ in range(150):
            v = random_pd(rng, 3, jitter=1.0)
            mu = np.linalg.cholesky(cov + 1e-10 * np.eye(3)) @ rng.standard_normal(3)
            data.append(Observation(mu + np.linalg.cholesky(v) @ rng.standard_normal(3), v))
        _, trace = em_fit(data, 2, EmConfig(seed=6, max_iters=200))
        assert np.all(np.diff(trace.loglik_per_iter) > -1e-8)


class TestRankConstrained:
    def test_full_rank_target_matches_unconstrained(self):
        rng = np.random.default_rng(48)
        x = draw(rng, 300, random_psd(rng, 3))
        data = identity_data(x)
        _, trace_free = em_fit(data, 2, EmConfig(seed=7))
        _, trace_full = em_fit_rank_constrained(data, 2, EmConfig(seed=7, rank_constraints=(3, 3)))
        n = min(len(trace_free.loglik_per_iter), len(trace_full.loglik_per_iter))
        np.testing.assert_allclose(
            trace_free.loglik_per_iter[:n], trace_full.loglik_per_iter[:n], rtol=1e-6
        )

    def test_rank_one_components(self):
        rng = np.random.default_rng(49)
        u1 = 3.0 * np.outer([1, 1, 0.01, 0.01, 0.01], [1, 1, 0.01, 0.01, 0.01])
        u2 = 3.0 * np.outer([1, -1, 1, 0.01, 0.01], [1, -1, 1, 0.01, 0.01])
        labels = rng.integers(0, 2, 600)
        z = rng.standard_normal((600, 5))
        f1 = np.linalg.cholesky(u1 + 1e-10 * np.eye(5))
        f2 = np.linalg.cholesky(u2 + 1e-10 * np.eye(5))
        mu = np.where(labels[:, None] == 0, z @ f1.T, z @ f2.T)
        x = mu + rng.standard_normal((600, 5))
        prior, _ = em_fit_rank_constrained(
            identity_data(x), 2, EmConfig(seed=8, rank_constraints=(1, 1))
        )
        for comp in prior.components:
            assert np.sum(np.linalg.eigvalsh(comp.u) > 1e-8) == 1

    def test_rank_one_direction_recovery(self):
        rng = np.random.default_rng(50)
        u = np.array([1.0, 1.0, 0.01, 0.01, 0.01])
        x = draw(rng, 1000, np.outer(u, u))
        prior, _ = em_fit_rank_constrained(
            identity_data(x), 1, EmConfig(seed=9, rank_constraints=(1,))
        )
        vals, vecs = np.linalg.eigh(prior.components[0].u)
        direction = vecs[:, -1]
        corr = abs(direction @ u / np.linalg.norm(u))
        assert corr > 0.99

    def test_requires_constraints(self):
        with pytest.raises(ValueError):
            em_fit_rank_constrained(
                identity_data(np.zeros((5, 2))), 1, EmConfig()
            )

    def test_varying_noise_rank_constraint(self):
        rng = np.random.default_rng(53)
        u = np.array([1.5, 1.0, 0.1])
        data = []
        for _ in range(250):
            v = random_pd(rng, 3, jitter=1.0)
            mu = u * rng.standard_normal()
            data.append(Observation(mu + np.linalg.cholesky(v) @ rng.standard_normal(3), v))
        prior, trace = em_fit_rank_constrained(
            data, 1, EmConfig(seed=11, init="pca_rank1", rank_constraints=(1,), max_iters=300)
        )
        assert np.sum(np.linalg.eigvalsh(prior.components[0].u) > 1e-8) == 1
        vals, vecs = np.linalg.eigh(prior.components[0].u)
        assert abs(vecs[:, -1] @ u / np.linalg.norm(u)) > 0.95


class TestRefitWeights:
    def test_weights_move_toward_data(self):
        rng = np.random.default_rng(51)
        x = draw(rng, 500, np.diag([4.0, 0.01]))
        data = identity_data(x)
        comps = (
            PriorComponent(0.5, np.diag([4.0, 0.01])),
            PriorComponent(0.5, 100 * np.eye(2)),
        )
        before = MixturePrior(comps)
        after = refit_weights(data, before)
        assert after.components[0].weight > 0.9
        assert marginal_log_likelihood(data, after) >= marginal_log_likelihood(data, before)
        assert after.weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(after.components[0].u, before.components[0].u)


class TestSigma2Mle:
    def test_truncated_at_zero(self):
        assert sigma2_mle_isotropic([5.0, 0.9, 0.9, 0.9, 0.9]) == 0.0

    def test_arithmetic(self):
        assert sigma2_mle_isotropic([5.0, 1.5, 1.5, 1.5, 1.5]) == pytest.approx(0.5)

    def test_too_small(self):
        with pytest.raises(DimensionTooSmall):
            sigma2_mle_isotropic([1.0])

    def test_matches_profile_likelihood_grid(self):
        rng = np.random.default_rng(52)
        r, n, sigma2 = 5, 100_000, 0.5
        u = rng.standard_normal(r)
        u /= np.linalg.norm(u)
        cov = np.outer(u, u) + (1.0 + sigma2) * np.eye(r)
        x = rng.standard_normal((n, r)) @ np.linalg.cholesky(cov).T
        sample_eigs = np.sort(np.linalg.eigvalsh(x.T @ x / n))[::-1]
        closed = sigma2_mle_isotropic(sample_eigs)

        def profile(s2):
            c = 1.0 + s2
            lam = max(sample_eigs[0] - c, 0.0)
            return -0.5 * (
                np.log(lam + c)
                + (r - 1) * np.log(c)
                + sample_eigs[0] / (lam + c)
                + sample_eigs[1:].sum() / c
            )

        grid = np.linspace(0.0, 2.0, 2001)
        best = grid[int(np.argmax([profile(s) for s in grid]))]
        assert abs(closed - best) <= 0.02
        assert abs(closed - sigma2) <= 0.05
