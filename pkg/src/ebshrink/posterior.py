"""Mixture posteriors, local false sign rates, and sign-decision rules.

The model: each observation x_i is normal with unknown mean mu_i and known
noise covariance V_i, and mu_i is drawn from a mixture of centered normals
with covariances ``u_k + diag(d_k)``. Everything here is exact normal
conjugacy; no sampling is involved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, ndtr

from .core import (
    MixturePrior,
    Observation,
    eigendecompose,
    symmetrize,
    validate_prior,
)
from .errors import (
    DegenerateCondition,
    DimensionMismatch,
    EmptySet,
    NotUnitVector,
    SingularCovariance,
)

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


def pack_observations(data: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray, bool]:
    """Stack observations into arrays, flagging a shared noise covariance.

    Returns (X, V, shared) where X is (N, R), V is (N, R, R), and shared is
    True when every V_i equals V_0, which unlocks much cheaper linear
    algebra downstream.
    """
    if len(data) == 0:
        raise DimensionMismatch("need at least one observation")
    dim = data[0].dim
    for i, obs in enumerate(data):
        if obs.dim != dim:
            raise DimensionMismatch(f"observation {i} has dimension {obs.dim}, expected {dim}")
    x = np.stack([obs.x for obs in data])
    v = np.stack([obs.v for obs in data])
    shared = bool(np.all(v == v[0]))
    return x, v, shared


def _check_prior_dim(prior: MixturePrior, dim: int) -> None:
    if prior.dim != dim:
        raise DimensionMismatch(f"prior dimension {prior.dim} does not match data dimension {dim}")


class _ComponentTerms(NamedTuple):
    logdens: np.ndarray  # (N,) log N(x_i; 0, W + V_i)
    mean: np.ndarray  # (N, R) posterior means W (W + V_i)^{-1} x_i
    var_diag: np.ndarray  # (N, R) diagonal of W - W (W + V_i)^{-1} W


def _component_terms(x: np.ndarray, v: np.ndarray, shared: bool, w: np.ndarray) -> _ComponentTerms:
    """Marginal log-density and posterior moments for one prior covariance."""
    n, r = x.shape
    if shared:
        t = w + v[0]
        try:
            lo = scipy.linalg.cholesky(t, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise SingularCovariance(f"marginal covariance not PD: {exc}") from None
        logdet = 2.0 * float(np.sum(np.log(np.diag(lo))))
        y = scipy.linalg.solve_triangular(lo, x.T, lower=True)
        quad = np.sum(y * y, axis=0)
        m = scipy.linalg.cho_solve((lo, True), w)  # T^{-1} W
        mean = x @ m
        var_diag = np.broadcast_to(np.diag(w) - np.einsum("rs,sr->r", w, m), (n, r))
    else:
        t = w + v
        try:
            chol = np.linalg.cholesky(t)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"marginal covariance not PD: {exc}") from None
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        rhs = np.concatenate([x[:, :, None], np.broadcast_to(w, (n, r, r))], axis=2)
        sol = np.linalg.solve(t, rhs)
        sx = sol[:, :, 0]  # T_i^{-1} x_i
        sw = sol[:, :, 1:]  # T_i^{-1} W
        quad = np.sum(x * sx, axis=1)
        mean = sx @ w
        var_diag = np.diag(w)[None, :] - np.einsum("rs,isr->ir", w, sw)
    logdens = -0.5 * (r * _LOG_2PI + logdet + quad)
    return _ComponentTerms(np.asarray(logdens), mean, np.asarray(var_diag))


def _neg_prob_from_components(
    comp_weights: np.ndarray, means: np.ndarray, var_diag: np.ndarray
) -> np.ndarray:
    """Mixture posterior P(mu_r <= 0 | x) with point-mass components handled.

    A component whose posterior marginal variance is zero contributes an
    indicator: 1 if its mean is negative, 0 if positive, 1/2 if zero.
    """
    var = np.maximum(var_diag, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(var > 0.0, -means / np.sqrt(var), 0.0)
    dens_part = ndtr(z)
    point_part = np.where(means < 0.0, 1.0, np.where(means > 0.0, 0.0, 0.5))
    contrib = np.where(var > 0.0, dens_part, point_part)
    return np.einsum("nk,nkr->nr", comp_weights, contrib)


class PosteriorStats(NamedTuple):
    """Per-observation posterior summaries for a whole dataset."""

    mean: np.ndarray  # (N, R)
    neg_prob: np.ndarray  # (N, R)
    lfsr: np.ndarray  # (N, R)
    comp_weights: np.ndarray  # (N, K)


def _mixture_terms(x, v, shared, prior):
    covs = prior.effective_covs()
    terms = [_component_terms(x, v, shared, w) for w in covs]
    logdens = np.stack([t.logdens for t in terms], axis=1)  # (N, K)
    with np.errstate(divide="ignore"):
        logpost = logdens + np.log(prior.weights)[None, :]
    log_marg = logsumexp(logpost, axis=1)
    comp_weights = np.exp(logpost - log_marg[:, None])
    return terms, log_marg, comp_weights


def marginal_log_likelihood(data: Sequence[Observation], prior: MixturePrior) -> float:
    """Total log-likelihood of the data under the mixture marginal.

    Computed per sample as logsumexp over components of
    ``log pi_k + log N(x_i; 0, u_k + diag(d_k) + V_i)`` and summed.
    """
    prior = validate_prior(prior)
    x, v, shared = pack_observations(data)
    _check_prior_dim(prior, x.shape[1])
    _, log_marg, _ = _mixture_terms(x, v, shared, prior)
    return float(np.sum(log_marg))


def posterior_stats(data: Sequence[Observation], prior: MixturePrior) -> PosteriorStats:
    """Posterior mean, negative-sign probability, and lfsr for every effect."""
    prior = validate_prior(prior)
    x, v, shared = pack_observations(data)
    _check_prior_dim(prior, x.shape[1])
    terms, _, comp_weights = _mixture_terms(x, v, shared, prior)
    means = np.stack([t.mean for t in terms], axis=1)  # (N, K, R)
    var_diag = np.stack([t.var_diag for t in terms], axis=1)
    neg_prob = _neg_prob_from_components(comp_weights, means, var_diag)
    mean = np.einsum("nk,nkr->nr", comp_weights, means)
    lfsr = np.minimum(neg_prob, 1.0 - neg_prob)
    return PosteriorStats(mean, neg_prob, lfsr, comp_weights)


@dataclass(frozen=True)
class PosteriorSummary:
    """Full mixture posterior of one observation plus per-condition lfsr."""

    comp_weights: np.ndarray  # (K,)
    comp_means: np.ndarray  # (K, R)
    comp_covs: np.ndarray  # (K, R, R)
    mean: np.ndarray  # (R,)
    neg_prob: np.ndarray  # (R,)
    lfsr: np.ndarray  # (R,)


def posterior_summary(obs: Observation, prior: MixturePrior) -> PosteriorSummary:
    """Exact mixture posterior of mu given one observation.

    Component weights are the normalized marginal densities, component
    means and covariances follow the usual normal-normal update with the
    effective prior covariance ``u_k + diag(d_k)``, and lfsr is
    ``min(P(mu_r <= 0 | x), 1 - P(mu_r <= 0 | x))`` per condition.
    """
    prior = validate_prior(prior)
    _check_prior_dim(prior, obs.dim)
    x = obs.x[None, :]
    v = obs.v[None, :, :]
    terms, _, comp_weights = _mixture_terms(x, v, True, prior)
    covs = []
    for w in prior.effective_covs():
        t = w + obs.v
        lo = scipy.linalg.cholesky(t, lower=True)
        tw = scipy.linalg.cho_solve((lo, True), w)
        covs.append(symmetrize(w - w @ tw))
    comp_covs = np.stack(covs)
    comp_means = np.stack([t.mean[0] for t in terms])
    var_diag = np.stack([t.var_diag[0] for t in terms])
    cw = comp_weights[0]
    neg_prob = _neg_prob_from_components(cw[None, :], comp_means[None], var_diag[None])[0]
    mean = cw @ comp_means
    lfsr = np.minimum(neg_prob, 1.0 - neg_prob)
    return PosteriorSummary(cw, comp_means, comp_covs, mean, neg_prob, lfsr)


def _require_unit(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(u))
    if abs(norm - 1.0) > 1e-10:
        raise NotUnitVector(f"expected a unit vector, got norm {norm!r}")
    return u


def lfsr_rank1_closed_form(x, u, lam: float) -> float:
    """lfsr under a known rank-1 prior ``lam * u u^T`` with identity noise.

    Returns ``1 - Phi(sqrt(lam / (lam + 1)) |u . x|)``. The value is shared
    by every condition: a rank-1 prior ties all signs to one latent scalar.
    """
    u = _require_unit(u)
    if lam <= 0:
        raise ValueError(f"scale must be positive, got {lam!r}")
    proj = abs(float(u @ np.asarray(x, dtype=np.float64).reshape(-1)))
    return float(1.0 - ndtr(np.sqrt(lam / (lam + 1.0)) * proj))


def negprob_fullrank_closed_form(x, u, sigma2: float, r: int) -> float:
    """P(mu_r <= 0 | x) for the prior ``u u^T + sigma2 I`` with identity noise.

    Closed form of the normal-normal update for this spiked prior:

        Phi( -(s * x_r + u_r (u . x))
             / sqrt((sigma2 + 1) (sigma2 + 2) (s + u_r^2)) ),

    with ``s = sigma2 (sigma2 + 2)``. At ``sigma2 = 0`` it reduces to the
    rank-1 expression ``Phi(-sign(u_r) (u . x) / sqrt(2))``.
    """
    u = _require_unit(u)
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be nonnegative, got {sigma2!r}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    s = sigma2 * (sigma2 + 2.0)
    num = s * x[r] + u[r] * float(u @ x)
    den = np.sqrt((sigma2 + 1.0) * (sigma2 + 2.0) * (s + u[r] ** 2))
    if den == 0.0:
        return 0.5  # point mass at zero: sigma2 = 0 and u_r = 0
    return float(ndtr(-num / den))


def negprob_eigen_decomposed(x, u_mat, r: int) -> float:
    """P(mu_r <= 0 | x) for prior covariance ``u_mat``, identity noise.

    Evaluates the spectral form: with eigenpairs (lambda_k, q_k) of the
    prior covariance and shrunk values lambda_k / (1 + lambda_k), the
    posterior marginal of mu_r is normal with mean and variance given by
    sums over the eigenbasis. Raises DegenerateCondition when condition r
    carries no posterior variance (a point mass at zero).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    dec = eigendecompose(u_mat)
    vals = np.maximum(dec.eigenvalues, 0.0)
    shrunk = vals / (1.0 + vals)
    q = dec.eigenvectors
    qr = q[r, :]
    den2 = float(np.sum(shrunk * qr * qr))
    if den2 == 0.0:
        raise DegenerateCondition(f"condition {r} has zero posterior variance")
    num = float(np.sum(shrunk * qr * (q.T @ x)))
    return float(ndtr(-num / np.sqrt(den2)))


def fsr_hat(lfsr_values, gamma) -> float:
    """Estimated false sign rate of a selection: mean lfsr over its members."""
    values = np.asarray(lfsr_values, dtype=np.float64).ravel()
    idx = np.asarray(list(gamma), dtype=np.intp).ravel()
    if idx.size == 0:
        raise EmptySet("cannot estimate FSR over an empty selection")
    return float(np.mean(values[idx]))


def s_values(lfsr_values) -> np.ndarray:
    """Running-mean transform of lfsr values.

    ``s_j`` is the mean of all lfsr values up to and including ``lfsr_j``,
    ties included, so effects with equal lfsr share one s-value. Output has
    the input's shape; s_j <= lfsr_j and s is monotone in lfsr.
    """
    values = np.asarray(lfsr_values, dtype=np.float64)
    flat = values.ravel()
    if flat.size == 0:
        return values.copy()
    if float(flat.min()) < 0.0 or float(flat.max()) > 0.5 + 1e-12:
        raise ValueError("lfsr values must lie in [0, 0.5]")
    order = np.argsort(flat, kind="stable")
    sorted_vals = flat[order]
    cummean = np.cumsum(sorted_vals) / np.arange(1, flat.size + 1)
    last_of_tie = np.searchsorted(sorted_vals, flat, side="right") - 1
    return cummean[last_of_tie].reshape(values.shape)


@dataclass(frozen=True)
class DecisionSet:
    """Effects whose signs are declared at a target FSR level.

    ``indices`` holds (observation, condition) pairs, ``estimated_signs``
    the sign of the posterior mean per member (exact zeros are declared
    positive and counted in ``zero_mean_members``).
    """

    indices: np.ndarray  # (M, 2) int
    estimated_signs: np.ndarray  # (M,) values in {+1, -1}
    threshold: float
    total_effects: int
    zero_mean_members: int = 0

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])

    @property
    def power(self) -> float:
        """Fraction of all effects whose sign is declared."""
        return self.size / self.total_effects if self.total_effects else 0.0


def reject_at_level(lfsr_matrix, posterior_means, alpha: float) -> DecisionSet:
    """Select every effect whose s-value is at most ``alpha``.

    The selection is computed over the flattened N x R effects; effects
    tied on lfsr enter or leave together, and the mean lfsr of a nonempty
    selection never exceeds ``alpha``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    lfsr = np.asarray(lfsr_matrix, dtype=np.float64)
    means = np.asarray(posterior_means, dtype=np.float64)
    if lfsr.shape != means.shape:
        raise DimensionMismatch(
            f"lfsr shape {lfsr.shape} does not match posterior means {means.shape}"
        )
    s = s_values(lfsr)
    mask = s <= alpha
    idx = np.argwhere(mask)
    signs = np.where(means[mask] >= 0.0, 1, -1).astype(np.int64)
    n_zero = int(np.count_nonzero(means[mask] == 0.0))
    if n_zero:
        logger.warning("%d selected effects have posterior mean exactly 0; declared +1", n_zero)
    return DecisionSet(
        indices=idx,
        estimated_signs=signs,
        threshold=float(alpha),
        total_effects=int(lfsr.size),
        zero_mean_members=n_zero,
    )


def threshold_lfsr(lfsr_matrix, posterior_means, alpha: float) -> DecisionSet:
    """Select every effect whose own lfsr is at most ``alpha``.

    The stricter sibling of ``reject_at_level``: it thresholds each
    effect's lfsr directly instead of the running mean, which is the
    convention most shrinkage software applies when reporting significant
    results. Both rules select prefixes of the lfsr ordering, so they
    trace the same realized-FSR-versus-power curve and differ only in how
    a nominal level maps onto it.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    lfsr = np.asarray(lfsr_matrix, dtype=np.float64)
    means = np.asarray(posterior_means, dtype=np.float64)
    if lfsr.shape != means.shape:
        raise DimensionMismatch(
            f"lfsr shape {lfsr.shape} does not match posterior means {means.shape}"
        )
    mask = lfsr <= alpha
    idx = np.argwhere(mask)
    signs = np.where(means[mask] >= 0.0, 1, -1).astype(np.int64)
    n_zero = int(np.count_nonzero(means[mask] == 0.0))
    return DecisionSet(
        indices=idx,
        estimated_signs=signs,
        threshold=float(alpha),
        total_effects=int(lfsr.size),
        zero_mean_members=n_zero,
    )


def fsp(decisions: DecisionSet, true_effects) -> float:
    """Realized false sign proportion of a selection against known truth.

    An effect whose true value is exactly zero counts as a sign error under
    either declared sign (and is logged), since no declared sign can be
    correct for it.
    """
    if decisions.size == 0:
        raise EmptySet("false sign proportion is undefined for an empty selection")
    truth = np.asarray(true_effects, dtype=np.float64)
    rows = decisions.indices[:, 0]
    cols = decisions.indices[:, 1]
    true_signs = np.sign(truth[rows, cols])
    n_zero_truth = int(np.count_nonzero(true_signs == 0))
    if n_zero_truth:
        logger.warning("%d selected effects are exactly 0 in truth; counted as errors", n_zero_truth)
    wrong = np.count_nonzero(true_signs != decisions.estimated_signs)
    return float(wrong / decisions.size)
