"""Domain types and symmetric-matrix utilities.

Conventions used throughout the package:

* matrices are dense float64 numpy arrays,
* symmetry is checked against an absolute tolerance of ``1e-10`` on the
  largest off-symmetry entry; inputs failing it are rejected rather than
  silently symmetrized,
* a matrix counts as PSD if its smallest eigenvalue is above ``-1e-8``;
  eigenvalues in ``[-1e-8, 0)`` are treated as exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    NotPSD,
    NotSymmetric,
    RankOutOfRange,
    WeightsInvalid,
)

SYMMETRY_TOL = 1e-10
PSD_EIG_TOL = -1e-8
WEIGHT_SUM_TOL = 1e-10


def _square_array(m) -> np.ndarray:
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    return a


def max_asymmetry(m: np.ndarray) -> float:
    """Largest absolute difference between ``m`` and its transpose."""
    return float(np.max(np.abs(m - m.T))) if m.size else 0.0


def require_symmetric(m, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Return ``m`` as a float64 array, raising NotSymmetric beyond ``tol``."""
    a = _square_array(m)
    gap = max_asymmetry(a)
    if gap > tol:
        raise NotSymmetric(f"max off-symmetry {gap:.3e} exceeds tolerance {tol:.1e}")
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average out floating-point asymmetry left by matrix products."""
    return 0.5 * (m + m.T)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Observation:
    """One observed R-vector with its known noise covariance.

    The noise covariance must be symmetric positive definite; the data
    vector must be finite.
    """

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64).reshape(-1)
        v = require_symmetric(self.v)
        if v.shape[0] != x.shape[0]:
            raise DimensionMismatch(
                f"observation has {x.shape[0]} conditions but noise is {v.shape[0]}x{v.shape[1]}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("observation vector contains non-finite entries")
        try:
            np.linalg.cholesky(v)
        except np.linalg.LinAlgError:
            raise NotPSD("noise covariance must be positive definite") from None
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "v", _freeze(v))

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class PriorComponent:
    """One mixture component: weight, structural covariance, diagonal add-on.

    ``d`` holds the diagonal of the full-rank adjustment and may be all
    zeros before any adjustment is applied. The covariance actually used in
    posterior computations is ``effective = u + diag(d)``.
    """

    weight: float
    u: np.ndarray
    d: np.ndarray | None = None

    def __post_init__(self):
        u = require_symmetric(self.u)
        d = self.d
        if d is None:
            d = np.zeros(u.shape[0])
        d = np.array(d, dtype=np.float64).reshape(-1)
        if d.shape[0] != u.shape[0]:
            raise DimensionMismatch(
                f"diagonal adjustment has length {d.shape[0]} but u is {u.shape[0]}x{u.shape[0]}"
            )
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "u", _freeze(u))
        object.__setattr__(self, "d", _freeze(d))

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    @property
    def effective(self) -> np.ndarray:
        """Covariance used for marginals and posteriors: u + diag(d)."""
        return self.u + np.diag(self.d)


@dataclass(frozen=True)
class MixturePrior:
    """Ordered mixture of normal prior components sharing one dimension."""

    components: tuple[PriorComponent, ...]
    dim: int = field(default=0)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture prior needs at least one component")
        object.__setattr__(self, "components", comps)
        if self.dim == 0:
            object.__setattr__(self, "dim", comps[0].dim)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def effective_covs(self) -> list[np.ndarray]:
        return [c.effective for c in self.components]


def validate_prior(prior: MixturePrior) -> MixturePrior:
    """Check all mixture-prior invariants, returning the prior unchanged.

    Raises
    ------
    DimensionMismatch
        if components disagree on the number of conditions.
    NotPSD
        if a structural covariance or effective covariance has an
        eigenvalue below -1e-8, or a diagonal adjustment entry is negative.
    WeightsInvalid
        if any weight is outside [0, 1] or the weights do not sum to one
        within 1e-10.
    """
    dims = {c.dim for c in prior.components}
    if len(dims) != 1 or prior.dim not in dims:
        raise DimensionMismatch(f"components disagree on dimension: {sorted(dims)}")
    w = prior.weights
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise WeightsInvalid(f"weights must lie in [0, 1], got {w}")
    if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOL:
        raise WeightsInvalid(f"weights sum to {w.sum()!r}, expected 1")
    for idx, comp in enumerate(prior.components):
        if np.any(comp.d < 0.0):
            raise NotPSD(f"component {idx}: diagonal adjustment has negative entries")
        lo = float(np.linalg.eigvalsh(comp.u)[0])
        if lo < PSD_EIG_TOL:
            raise NotPSD(f"component {idx}: smallest eigenvalue {lo:.3e} of u below tolerance")
        lo_eff = float(np.linalg.eigvalsh(comp.effective)[0])
        if lo_eff < PSD_EIG_TOL:
            raise NotPSD(
                f"component {idx}: smallest eigenvalue {lo_eff:.3e} of u + diag(d) below tolerance"
            )
    return prior


@dataclass(frozen=True)
class EigenDecomp:
    """Spectral decomposition with eigenvalues sorted in descending order."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def eigendecompose(m) -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Ties are left in the order produced by the symmetric eigensolver after
    the descending sort; downstream computations are invariant to the
    choice of basis within an eigenspace.
    """
    a = require_symmetric(m)
    vals, vecs = np.linalg.eigh(a)
    order = np.argsort(vals, kind="stable")[::-1]
    return EigenDecomp(_freeze(vals[order].copy()), _freeze(vecs[:, order].copy()))


def truncate_rank(m, r: int) -> np.ndarray:
    """Best PSD approximation of ``m`` with rank at most ``r``.

    Eigenvalues are clamped at zero and all but the ``r`` largest are
    dropped, so the result is PSD even for mildly indefinite input.
    """
    dec = eigendecompose(m)
    n = dec.eigenvalues.shape[0]
    if not 1 <= r <= n:
        raise RankOutOfRange(f"rank {r} outside 1..{n}")
    vals = np.maximum(dec.eigenvalues, 0.0)
    vals[r:] = 0.0
    q = dec.eigenvectors[:, :r]
    return symmetrize((q * vals[:r]) @ q.T)


def psd_project(m) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm: clamp negative eigenvalues at 0."""
    dec = eigendecompose(m)
    vals = np.maximum(dec.eigenvalues, 0.0)
    q = dec.eigenvectors
    return symmetrize((q * vals) @ q.T)
