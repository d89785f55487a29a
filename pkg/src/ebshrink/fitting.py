"""Maximum-likelihood fitting of mixture prior covariances by EM.

Responsibilities come from the mixture marginal densities. The covariance
update depends on the noise structure:

* shared noise covariance V: the M-step maximizer has a closed form. With
  S_k the responsibility-weighted second moment of component k, the
  PSD-constrained maximizer of the expected complete-data log-likelihood
  is the eigenvalue clamp of S_k - V in the V-whitened basis
  (psd_project(S_k - I) when V = I). For one component this lands on the
  fitted covariance in a single step.
* per-sample noise V_i: no closed form exists, so the deconvolution
  moment update is used, averaging the responsibility-weighted posterior
  second moments

      b_ik = u_k (u_k + V_i)^{-1} x_i,
      B_ik = u_k - u_k (u_k + V_i)^{-1} u_k,
      u_k <- (1 / n_k) sum_i gamma_ik (b_ik b_ik^T + B_ik).

Both are monotone EM updates. Optional rank constraints truncate
eigenvalues after each update; the recorded log-likelihood trace may then
dip, and monotonicity is checked on the pre-truncation update instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .core import (
    MixturePrior,
    Observation,
    PriorComponent,
    eigendecompose,
    psd_project,
    symmetrize,
    truncate_rank,
)
from .errors import (
    DegenerateComponent,
    DimensionMismatch,
    DimensionTooSmall,
    NoIncrease,
    SingularCovariance,
)
from .posterior import _LOG_2PI, pack_observations

logger = logging.getLogger(__name__)

COLLAPSE_FRACTION = 1e-6
MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """Settings for one EM run.

    ``rank_constraints`` gives a target rank per component. ``init`` is
    one of ``random_full_rank_psd`` (seeded random PD start, scaled to
    trace R), ``pca_rank1`` (rank-one starts from the leading eigenpairs
    of the pooled second moment minus the average noise covariance, the
    usual data-driven candidates), or ``user_supplied`` with
    ``init_components`` filled in.
    """

    max_iters: int = 1000
    tol: float = 1e-7
    rank_constraints: tuple[int, ...] | None = None
    seed: int = 0
    init: str = "random_full_rank_psd"
    init_components: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.init not in ("random_full_rank_psd", "pca_rank1", "user_supplied"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.rank_constraints is not None:
            object.__setattr__(self, "rank_constraints", tuple(int(r) for r in self.rank_constraints))


@dataclass(frozen=True)
class EmTrace:
    """Diagnostics of one EM run.

    ``responsibilities`` are the posterior component-assignment
    probabilities at convergence; ``effective_sizes`` are their per-column
    sums, the effective number of samples behind each component.
    """

    loglik_per_iter: np.ndarray
    responsibilities: np.ndarray  # (N, K)
    effective_sizes: np.ndarray  # (K,)


def _random_start(rng: np.random.Generator, r: int) -> np.ndarray:
    a = rng.standard_normal((r, r))
    m = a @ a.T + 0.1 * np.eye(r)
    return m * (r / np.trace(m))


def _init_covs(config: EmConfig, k: int, x: np.ndarray, v: np.ndarray) -> list[np.ndarray]:
    r = x.shape[1]
    if config.init == "user_supplied":
        if config.init_components is None or len(config.init_components) != k:
            raise ValueError("user_supplied init needs one starting covariance per component")
        return [np.array(u, dtype=np.float64) for u in config.init_components]
    if config.init == "pca_rank1":
        if k > r:
            raise ValueError(f"pca_rank1 init supports at most {r} components")
        signal = symmetrize(x.T @ x / x.shape[0] - v.mean(axis=0))
        vals, vecs = np.linalg.eigh(signal)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        return [max(float(vals[j]), 0.05) * np.outer(vecs[:, j], vecs[:, j]) for j in range(k)]
    rng = np.random.default_rng(config.seed)
    return [_random_start(rng, r) for _ in range(k)]


class _SharedWhitener:
    """Square root and inverse square root of a shared noise covariance."""

    def __init__(self, v: np.ndarray):
        dec = eigendecompose(v)
        if dec.eigenvalues[-1] <= 0:
            raise SingularCovariance("shared noise covariance is not PD")
        root = np.sqrt(dec.eigenvalues)
        q = dec.eigenvectors
        self.half = symmetrize((q * root) @ q.T)
        self.inv_half = symmetrize((q / root) @ q.T)
        self.is_identity = bool(np.array_equal(v, np.eye(v.shape[0])))

    def constrained_mle(self, second_moment: np.ndarray) -> np.ndarray:
        """PSD maximizer of -log|U+V| - tr((U+V)^{-1} S) given S."""
        if self.is_identity:
            return psd_project(second_moment - np.eye(second_moment.shape[0]))
        white = self.inv_half @ second_moment @ self.inv_half
        dec = eigendecompose(symmetrize(white))
        vals = np.maximum(dec.eigenvalues - 1.0, 0.0)
        q = dec.eigenvectors
        inner = (q * vals) @ q.T
        return symmetrize(self.half @ inner @ self.half)


class _EStep:
    """Log-densities plus the solve products reused by the M-step."""

    __slots__ = ("loglik", "gamma", "sizes", "xsolve", "wsolve", "shared")

    def __init__(self, x, v, shared, weights, covs):
        n, r = x.shape
        k = len(covs)
        logdens = np.empty((n, k))
        self.xsolve = []  # per component: (N, R) rows of T^{-1} x (varying V only)
        self.wsolve = []  # per component: (N, R, R) stacks of T^{-1} u_k (varying V only)
        self.shared = shared
        for j, w in enumerate(covs):
            if shared:
                t = w + v[0]
                try:
                    lo = scipy.linalg.cholesky(t, lower=True)
                except scipy.linalg.LinAlgError as exc:
                    raise SingularCovariance(f"component {j}: {exc}") from None
                logdet = 2.0 * float(np.sum(np.log(np.diag(lo))))
                y = scipy.linalg.solve_triangular(lo, x.T, lower=True)
                quad = np.sum(y * y, axis=0)
                self.xsolve.append(None)
                self.wsolve.append(None)
            else:
                t = w + v
                try:
                    chol = np.linalg.cholesky(t)
                except np.linalg.LinAlgError as exc:
                    raise SingularCovariance(f"component {j}: {exc}") from None
                logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
                rhs = np.concatenate([x[:, :, None], np.broadcast_to(w, (n, r, r))], axis=2)
                sol = np.linalg.solve(t, rhs)
                quad = np.sum(x * sol[:, :, 0], axis=1)
                self.xsolve.append(sol[:, :, 0])
                self.wsolve.append(sol[:, :, 1:])
            logdens[:, j] = -0.5 * (r * _LOG_2PI + logdet + quad)
        with np.errstate(divide="ignore"):
            logpost = logdens + np.log(weights)[None, :]
        log_marg = logsumexp(logpost, axis=1)
        self.loglik = float(np.sum(log_marg))
        self.gamma = np.exp(logpost - log_marg[:, None])
        self.sizes = self.gamma.sum(axis=0)

    def updated_cov(self, j, x, w, whitener: _SharedWhitener | None) -> np.ndarray:
        """M-step covariance for component j.

        With a shared noise covariance the update jumps straight to the
        constrained maximizer; otherwise it is the moment update, followed
        by the PSD projection as a numerical guard.
        """
        g = self.gamma[:, j]
        nk = self.sizes[j]
        if self.shared:
            second = (x * g[:, None]).T @ x / nk
            return whitener.constrained_mle(symmetrize(second))
        sx = self.xsolve[j]
        b = sx @ w
        second = b.T @ (g[:, None] * b) / nk
        mean_tw = np.einsum("i,iab->ab", g, self.wsolve[j]) / nk
        bcov = w - w @ mean_tw
        return psd_project(symmetrize(second + bcov))


def _run_em(
    data: Sequence[Observation], k: int, config: EmConfig, ranks: tuple[int, ...] | None
) -> tuple[MixturePrior, EmTrace]:
    x, v, shared = pack_observations(data)
    n, r = x.shape
    if n < k:
        raise DimensionMismatch(f"need at least {k} observations to fit {k} components")
    if ranks is not None:
        if len(ranks) != k:
            raise ValueError(f"got {len(ranks)} rank constraints for {k} components")
        for rk in ranks:
            if not 1 <= rk <= r:
                raise ValueError(f"rank constraint {rk} outside 1..{r}")
    whitener = _SharedWhitener(v[0]) if shared else None
    covs = _init_covs(config, k, x, v)
    weights = np.full(k, 1.0 / k)
    trace: list[float] = []
    step = None
    for _ in range(config.max_iters):
        step = _EStep(x, v, shared, weights, covs)
        if np.any(step.sizes < COLLAPSE_FRACTION * n):
            dead = int(np.argmin(step.sizes))
            raise DegenerateComponent(
                f"component {dead} collapsed (effective size {step.sizes[dead]:.3e})"
            )
        if trace:
            drop = trace[-1] - step.loglik
            if ranks is None and drop > MONOTONE_SLACK:
                raise NoIncrease(f"log-likelihood dropped by {drop:.3e}")
            if abs(step.loglik - trace[-1]) < config.tol * max(abs(trace[-1]), 1.0):
                trace.append(step.loglik)
                break
        trace.append(step.loglik)
        new_covs = [step.updated_cov(j, x, covs[j], whitener) for j in range(k)]
        new_weights = step.sizes / n
        if ranks is not None:
            # Truncation can lower the likelihood; the EM guarantee is
            # checked on the raw update before it is applied.
            raw = _EStep(x, v, shared, new_weights, new_covs)
            if raw.loglik < step.loglik - MONOTONE_SLACK:
                raise NoIncrease(
                    f"pre-truncation log-likelihood dropped by {step.loglik - raw.loglik:.3e}"
                )
            new_covs = [truncate_rank(c, rk) for c, rk in zip(new_covs, ranks)]
        covs = new_covs
        weights = new_weights
    else:
        step = _EStep(x, v, shared, weights, covs)
        trace.append(step.loglik)
        logger.info("EM stopped at max_iters=%d without meeting tol", config.max_iters)
    prior = MixturePrior(
        tuple(PriorComponent(float(w), c) for w, c in zip(weights, covs))
    )
    em_trace = EmTrace(
        loglik_per_iter=np.array(trace),
        responsibilities=step.gamma,
        effective_sizes=step.sizes,
    )
    return prior, em_trace


def em_fit(
    data: Sequence[Observation], k: int, config: EmConfig | None = None
) -> tuple[MixturePrior, EmTrace]:
    """Fit a K-component mixture prior by EM.

    Returns the fitted prior (all diagonal adjustments zero) and the run
    trace. Honors ``config.rank_constraints`` when present. Raises
    DegenerateComponent if a component's effective size collapses and
    NoIncrease if the log-likelihood decreases beyond numerical slack.
    """
    config = config or EmConfig()
    return _run_em(data, k, config, config.rank_constraints)


def em_fit_rank_constrained(
    data: Sequence[Observation], k: int, config: EmConfig
) -> tuple[MixturePrior, EmTrace]:
    """EM with per-component rank targets enforced after each update."""
    if config.rank_constraints is None:
        raise ValueError("config.rank_constraints is required")
    return _run_em(data, k, config, config.rank_constraints)


def refit_weights(
    data: Sequence[Observation],
    prior: MixturePrior,
    max_iters: int = 500,
    tol: float = 1e-10,
) -> MixturePrior:
    """Re-estimate the mixture weights with the covariances held fixed.

    Run after the covariances have been modified (rank truncation or a
    diagonal adjustment): the modified matrices are treated as given and
    the weights are refit by EM on the marginal likelihood, which is the
    same convex subproblem the original model solves for fixed
    covariances.
    """
    from .posterior import _component_terms

    x, v, shared = pack_observations(data)
    logdens = np.stack(
        [_component_terms(x, v, shared, w).logdens for w in prior.effective_covs()], axis=1
    )
    weights = prior.weights.copy()
    prev = None
    for _ in range(max_iters):
        with np.errstate(divide="ignore"):
            logpost = logdens + np.log(weights)[None, :]
        log_marg = logsumexp(logpost, axis=1)
        loglik = float(np.sum(log_marg))
        if prev is not None and abs(loglik - prev) < tol * max(abs(prev), 1.0):
            break
        prev = loglik
        weights = np.exp(logpost - log_marg[:, None]).mean(axis=0)
    comps = tuple(
        PriorComponent(float(w), c.u, c.d) for w, c in zip(weights, prior.components)
    )
    return MixturePrior(comps)


def sigma2_mle_isotropic(sample_eigenvalues) -> float:
    """Closed-form MLE of the isotropic diagonal inflation.

    For data distributed as N(0, u u^T + (1 + sigma^2) I) with unit u, the
    MLE of sigma^2 is the positive part of (mean of the trailing R-1 sample
    eigenvalues) - 1. A value of zero signals that the data cannot rule out
    a degenerate prior, which is exactly the failure mode the confidence
    upper bounds are designed around.
    """
    vals = np.sort(np.asarray(sample_eigenvalues, dtype=np.float64).ravel())[::-1]
    if vals.size < 2:
        raise DimensionTooSmall("need at least two eigenvalues")
    return float(max(vals[1:].mean() - 1.0, 0.0))


def fit_config_with_seed(config: EmConfig, seed: int) -> EmConfig:
    """Copy of ``config`` with the RNG seed replaced."""
    return replace(config, seed=int(seed))
