"""Full-rank diagonal adjustment of fitted prior covariances.

A rank-deficient prior covariance ties effect signs together and makes the
per-condition lfsr overconfident. The fix implemented here inflates each
fitted diagonal entry to the upper end of its sampling interval, so that
every condition keeps its own sign uncertainty:

* ``Constant``: add c * I outright,
* ``InfoMat``: Wald upper bound, MLE + z * s.e. from the inverse of the
  analytic Fisher information of the covariance parameters,
* ``LowerBound``: MLE + multiplier * sqrt(variance lower bound), a cheap
  surrogate that skips assembling and inverting the information matrix.

Mixture components are handled through responsibility-weighted sums, i.e.
the expected-complete-data information with the assignment probabilities
held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .core import (
    MixturePrior,
    PriorComponent,
    psd_project,
    require_symmetric,
    symmetrize,
)
from .errors import (
    DimensionMismatch,
    NotPSD,
    SingularInformation,
    SingularT,
    UnknownTarget,
)
from .fitting import EmTrace


@dataclass(frozen=True)
class ParamIndex:
    """Flat ordering of covariance parameters.

    The unique entries of the structural covariance come first, row by row
    (u_11, u_12, ..., u_1R, u_22, ..., u_RR), optionally followed by the R
    diagonal inflation parameters.
    """

    dim: int
    include_d: bool = False

    @property
    def n_u(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @property
    def size(self) -> int:
        return self.n_u + (self.dim if self.include_d else 0)

    def entries(self) -> list[tuple[str, int, int]]:
        """(kind, row, col) per flat position, with row <= col for 'u'."""
        out: list[tuple[str, int, int]] = []
        for r in range(self.dim):
            for c in range(r, self.dim):
                out.append(("u", r, c))
        if self.include_d:
            for r in range(self.dim):
                out.append(("d", r, r))
        return out

    def diag_u_position(self, r: int) -> int:
        """Flat position of u_rr."""
        if not 0 <= r < self.dim:
            raise IndexError(f"condition {r} outside 0..{self.dim - 1}")
        return r * self.dim - r * (r - 1) // 2

    def diag_u_positions(self) -> np.ndarray:
        return np.array([self.diag_u_position(r) for r in range(self.dim)])


@dataclass(frozen=True)
class InfoMatrix:
    """Assembled Fisher-information blocks for one prior covariance.

    ``a`` covers the structural-covariance parameters, ``b`` and ``c`` the
    cross and diagonal-inflation blocks (present only when the diagonal
    parameters are part of the model).
    """

    a: np.ndarray
    b: np.ndarray | None
    c: np.ndarray | None
    index: ParamIndex
    weights: np.ndarray | None = None

    def full(self) -> np.ndarray:
        if self.b is None:
            return self.a
        top = np.hstack([self.a, self.b])
        bottom = np.hstack([self.b.T, self.c])
        return np.vstack([top, bottom])


def _entry_from_products(s: np.ndarray, w: np.ndarray, e1, e2) -> float:
    """One information entry from stacked inverses ``s`` of shape (N, R, R)."""
    _, a, b = e1
    _, c, d = e2
    diag1 = a == b
    diag2 = c == d
    if diag1 and diag2:
        return 0.5 * float(np.sum(w * s[:, a, c] * s[:, a, c]))
    if diag1:
        return float(np.sum(w * s[:, a, c] * s[:, a, d]))
    if diag2:
        return float(np.sum(w * s[:, c, a] * s[:, c, b]))
    return float(np.sum(w * (s[:, c, b] * s[:, a, d] + s[:, a, c] * s[:, b, d])))


def info_entry(t_inverses, j: int, k: int, index: ParamIndex, weights=None) -> float:
    """Single Fisher-information entry from precomputed marginal inverses.

    ``t_inverses`` stacks the inverses of the per-sample marginal
    covariances; ``j`` and ``k`` are flat positions in ``index``. The
    closed forms only touch a handful of inverse entries per sample, which
    is what makes assembling the full matrix cheap.
    """
    s = np.asarray(t_inverses, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    n = s.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    entries = index.entries()
    return _entry_from_products(s, w, entries[j], entries[k])


def _t_inverses(u: np.ndarray, d: np.ndarray | None, data_covs) -> np.ndarray:
    v = np.asarray(data_covs, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    t = u[None] + v
    if d is not None:
        t = t + np.diag(d)[None]
    try:
        np.linalg.cholesky(t)
    except np.linalg.LinAlgError as exc:
        raise SingularT(f"marginal covariance in information sum not PD: {exc}") from None
    return np.linalg.inv(t)


def assemble_info(u, d, data_covs, weights=None) -> InfoMatrix:
    """Fisher information of the covariance parameters, optionally weighted.

    Each sample's contribution is multiplied by its weight (responsibility
    for mixture components; all ones when absent). Pass ``d=None`` to
    restrict the parameter set to the structural covariance alone, which
    keeps the information invertible when the structural part is full rank.
    """
    u = require_symmetric(u)
    dim = u.shape[0]
    dvec = None if d is None else np.asarray(d, dtype=np.float64).reshape(-1)
    if dvec is not None and dvec.shape[0] != dim:
        raise DimensionMismatch(f"diagonal has length {dvec.shape[0]}, expected {dim}")
    s = _t_inverses(u, dvec, data_covs)
    n = s.shape[0]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != n:
            raise DimensionMismatch(f"{w.shape[0]} weights for {n} samples")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("weights must lie in [0, 1]")
    index = ParamIndex(dim, include_d=dvec is not None)
    # All entries are weighted sums of products of two inverse entries;
    # precompute the fourth-order sum once and read every block off it.
    g = np.einsum("i,iab,icd->abcd", w, s, s)
    entries = index.entries()
    n_u = index.n_u
    a_block = np.empty((n_u, n_u))
    for j in range(n_u):
        _, ja, jb = entries[j]
        for k in range(j, n_u):
            _, ka, kb = entries[k]
            if ja == jb and ka == kb:
                val = 0.5 * g[ja, ka, ja, ka]
            elif ja == jb:
                val = g[ja, ka, ja, kb]
            elif ka == kb:
                val = g[ka, ja, ka, jb]
            else:
                val = g[ka, jb, ja, kb] + g[ja, ka, jb, kb]
            a_block[j, k] = val
            a_block[k, j] = val
    b_block = None
    c_block = None
    if dvec is not None:
        b_block = np.empty((n_u, dim))
        for j in range(n_u):
            _, ja, jb = entries[j]
            for l in range(dim):
                b_block[j, l] = 0.5 * g[ja, l, ja, l] if ja == jb else g[ja, l, jb, l]
        c_block = np.empty((dim, dim))
        for r in range(dim):
            for l in range(r, dim):
                c_block[r, l] = 0.5 * g[r, l, r, l]
                c_block[l, r] = c_block[r, l]
    return InfoMatrix(a_block, b_block, c_block, index, None if weights is None else w)


def se_diag_u(info: InfoMatrix) -> np.ndarray:
    """Asymptotic standard errors of the fitted diagonal entries.

    Square roots of the inverse-information diagonal at the positions of
    u_11, ..., u_RR. Raises SingularInformation when the assembled matrix
    cannot be factorized, which is the symptom of a non-identifiable
    parameterization (for instance a full-rank structural covariance fitted
    jointly with free diagonal inflations).
    """
    m = info.full()
    positions = info.index.diag_u_positions()
    try:
        lo = scipy.linalg.cho_factor(m, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise SingularInformation(f"information matrix not PD: {exc}") from None
    rhs = np.zeros((m.shape[0], positions.size))
    rhs[positions, np.arange(positions.size)] = 1.0
    cols = scipy.linalg.cho_solve(lo, rhs)
    variances = cols[positions, np.arange(positions.size)]
    if np.any(variances <= 0.0):
        raise SingularInformation("inverse information has nonpositive diagonal entries")
    return np.sqrt(variances)


def wald_upper_bound(u_rr_mle: float, se: float, alpha: float = 0.05) -> float:
    """Upper end of the two-sided Wald interval: MLE + z_{1 - alpha/2} * s.e."""
    if se < 0:
        raise ValueError(f"standard error must be nonnegative, got {se!r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    return float(u_rr_mle + norm.ppf(1.0 - alpha / 2.0) * se)


def variance_lower_bound(u, data_covs, weights=None, target: str = "diag_d"):
    """Cheap lower bounds on estimator variances, bypassing full inversion.

    The bounds drop the off-diagonal coupling of the information matrix,
    which can only shrink the implied variance, so they hold whenever the
    full inverse exists:

    * ``diag_d``: per-condition bound 2 / sum_i w_i ((u + V_i)^{-1}_rr)^2,
    * ``diag_d_isotropic``: scalar bound using the Frobenius norm of
      (u + V_i)^{-1},
    * ``diag_u``: per-condition bound 2 / sum_i w_i ((V_i^{-1})_rr)^2,
      evaluated at a vanishing structural part, the worst case for the
      fitted diagonal.
    """
    u = require_symmetric(u)
    v = np.asarray(data_covs, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    n = v.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise DimensionMismatch(f"{w.shape[0]} weights for {n} samples")
    if target == "diag_u":
        inv = np.linalg.inv(v)
        denom = np.einsum("i,irr->r", w, inv**2)
        return 2.0 / denom
    t = u[None] + v
    try:
        np.linalg.cholesky(t)
    except np.linalg.LinAlgError as exc:
        raise SingularT(f"u + V_i not PD: {exc}") from None
    inv = np.linalg.inv(t)
    if target == "diag_d":
        denom = np.einsum("i,irr->r", w, inv**2)
        return 2.0 / denom
    if target == "diag_d_isotropic":
        denom = float(np.einsum("i,iab,iab->", w, inv, inv))
        return 2.0 / denom
    raise UnknownTarget(f"unknown variance bound target {target!r}")


def rule_of_two_bound(n_effective: float) -> float:
    """Likelihood-interval floor for a diagonal inflation: 2 / sqrt(n).

    Comes from the two-units-of-log-likelihood convention for an
    approximate 95% interval at a boundary estimate of zero.
    """
    if n_effective <= 0:
        raise ValueError(f"effective sample size must be positive, got {n_effective!r}")
    return float(2.0 / np.sqrt(n_effective))


@dataclass(frozen=True)
class Constant:
    """Add ``value * I`` to every component covariance."""

    value: float = 0.03

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("constant adjustment must be positive")


@dataclass(frozen=True)
class InfoMat:
    """Replace each fitted diagonal by its Wald upper bound."""

    alpha: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")


@dataclass(frozen=True)
class LowerBound:
    """Inflate each fitted diagonal by multiplier * sqrt(variance bound)."""

    multiplier: float = 2.0

    def __post_init__(self):
        if self.multiplier <= 0:
            raise ValueError("multiplier must be positive")


AdjustMethod = Constant | InfoMat | LowerBound


def adjust_prior(
    prior: MixturePrior,
    trace: EmTrace | None,
    data_covs: Sequence[np.ndarray] | np.ndarray | None,
    method: AdjustMethod,
) -> MixturePrior:
    """Make every component covariance full rank by inflating its diagonal.

    Off-diagonal entries are never touched and no diagonal entry ever
    decreases. The data-driven methods weight each sample's contribution by
    the component's responsibilities from ``trace``, so a component backed
    by few samples receives a proportionally wider inflation. The result is
    passed through the PSD projection and checked to be strictly positive
    definite.
    """
    for idx, comp in enumerate(prior.components):
        if np.any(comp.d != 0.0):
            raise ValueError(f"component {idx} already carries a diagonal adjustment")
    needs_data = not isinstance(method, Constant)
    if needs_data:
        if trace is None or data_covs is None:
            raise ValueError("info_mat and lower_bound adjustments need the fit trace and noise covariances")
        gamma = np.asarray(trace.responsibilities, dtype=np.float64)
        v = np.asarray(data_covs, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if gamma.shape[0] != v.shape[0] and v.shape[0] != 1:
            raise DimensionMismatch(
                f"trace covers {gamma.shape[0]} samples but {v.shape[0]} noise covariances given"
            )
        if v.shape[0] == 1 and gamma.shape[0] > 1:
            v = np.broadcast_to(v[0], (gamma.shape[0],) + v.shape[1:])
        if gamma.shape[1] != prior.k:
            raise DimensionMismatch(
                f"trace has {gamma.shape[1]} components but prior has {prior.k}"
            )
    adjusted = []
    for k, comp in enumerate(prior.components):
        u = comp.u
        if isinstance(method, Constant):
            new_u = u + method.value * np.eye(prior.dim)
        elif isinstance(method, InfoMat):
            info = assemble_info(u, None, v, weights=np.clip(gamma[:, k], 0.0, 1.0))
            se = se_diag_u(info)
            new_diag = np.array(
                [wald_upper_bound(u[r, r], se[r], method.alpha) for r in range(prior.dim)]
            )
            new_u = u.copy()
            np.fill_diagonal(new_u, new_diag)
        else:
            bound = variance_lower_bound(u, v, weights=gamma[:, k], target="diag_u")
            new_u = u.copy()
            np.fill_diagonal(new_u, np.diag(u) + method.multiplier * np.sqrt(bound))
        new_u = psd_project(symmetrize(new_u))
        lo = float(np.linalg.eigvalsh(new_u)[0])
        if lo <= 0.0:
            raise NotPSD(f"component {k}: adjusted covariance not positive definite ({lo:.3e})")
        adjusted.append(PriorComponent(comp.weight, new_u))
    return MixturePrior(tuple(adjusted))
