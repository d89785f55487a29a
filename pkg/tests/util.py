"""Shared helpers for the test suite."""

import numpy as np


def random_symmetric(rng, r, scale=5.0):
    a = rng.uniform(-scale, scale, (r, r))
    return 0.5 * (a + a.T)


def random_psd(rng, r, rank=None):
    rank = r if rank is None else rank
    a = rng.standard_normal((r, rank))
    return a @ a.T


def random_pd(rng, r, jitter=0.5):
    return random_psd(rng, r) + jitter * np.eye(r)


def random_unit(rng, r):
    u = rng.standard_normal(r)
    return u / np.linalg.norm(u)


def _det_and_adjugate(t):
    """Determinant and adjugate in extended precision, R in {2, 3}."""
    r = t.shape[0]
    if r == 2:
        det = t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]
        adj = np.array([[t[1, 1], -t[0, 1]], [-t[1, 0], t[0, 0]]], dtype=np.longdouble)
        return det, adj
    if r == 3:
        cof = np.empty((3, 3), dtype=np.longdouble)
        for i in range(3):
            for j in range(3):
                rows = [a for a in range(3) if a != i]
                cols = [b for b in range(3) if b != j]
                minor = t[np.ix_(rows, cols)]
                cof[i, j] = (-1) ** (i + j) * (
                    minor[0, 0] * minor[1, 1] - minor[0, 1] * minor[1, 0]
                )
        det = sum(t[0, j] * cof[0, j] for j in range(3))
        return det, cof.T
    raise ValueError("oracle supports dimensions 2 and 3 only")


def fisher_fd_oracle(u0, d0, v_list, weights=None, step=1e-5, richardson=False):
    """Finite-difference Hessian oracle for the covariance information matrix.

    Evaluates f(theta) = -1/2 sum_i w_i (log|T_i(theta)| + tr(T_i(theta)^{-1}
    T_i(theta_0))) in extended precision with explicit cofactor algebra, and
    returns -H(f) at theta_0 by central differences. f is the expected
    log-likelihood up to a constant, so -H equals the Fisher information.
    Parameter order matches the package layout: row-wise upper triangle of
    the structural covariance, then the diagonal entries (when d0 given).

    With ``richardson=True`` the estimate combines steps h and h/2 to cancel
    the leading truncation term, which brings even near-zero entries inside
    a 1e-4 relative tolerance; use a larger base step there (around 2e-4) so
    rounding stays negligible.
    """
    if richardson:
        coarse = fisher_fd_oracle(u0, d0, v_list, weights=weights, step=step)
        fine = fisher_fd_oracle(u0, d0, v_list, weights=weights, step=step / 2)
        return (4.0 * fine - coarse) / 3.0
    u0 = np.asarray(u0, dtype=np.longdouble)
    r = u0.shape[0]
    v = np.asarray(v_list, dtype=np.longdouble)
    n = v.shape[0]
    w = np.ones(n, dtype=np.longdouble) if weights is None else np.asarray(weights, dtype=np.longdouble)
    include_d = d0 is not None
    d0 = np.zeros(r, dtype=np.longdouble) if d0 is None else np.asarray(d0, dtype=np.longdouble)
    pairs = [(i, j) for i in range(r) for j in range(i, r)]
    n_params = len(pairs) + (r if include_d else 0)

    def build(theta):
        u = np.zeros((r, r), dtype=np.longdouble)
        for pos, (i, j) in enumerate(pairs):
            u[i, j] = theta[pos]
            u[j, i] = theta[pos]
        d = theta[len(pairs):] if include_d else d0
        return u + np.diag(d)

    theta0 = np.array(
        [u0[i, j] for i, j in pairs] + (list(d0) if include_d else []), dtype=np.longdouble
    )
    t0_stack = [build(theta0) + v[i] for i in range(n)]

    def f(theta):
        core = build(theta)
        total = np.longdouble(0.0)
        for i in range(n):
            t = core + v[i]
            det, adj = _det_and_adjugate(t)
            trace_term = np.trace(adj @ t0_stack[i]) / det
            total += w[i] * (np.log(det) + trace_term)
        return -0.5 * total

    h = np.longdouble(step)
    hess = np.empty((n_params, n_params), dtype=np.longdouble)
    f0 = f(theta0)
    for a in range(n_params):
        ea = np.zeros(n_params, dtype=np.longdouble)
        ea[a] = h
        hess[a, a] = (f(theta0 + ea) - 2 * f0 + f(theta0 - ea)) / h**2
        for b in range(a + 1, n_params):
            eb = np.zeros(n_params, dtype=np.longdouble)
            eb[b] = h
            val = (
                f(theta0 + ea + eb)
                - f(theta0 + ea - eb)
                - f(theta0 - ea + eb)
                + f(theta0 - ea - eb)
            ) / (4 * h**2)
            hess[a, b] = val
            hess[b, a] = val
    return (-hess).astype(np.float64)
