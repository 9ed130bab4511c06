"""Independent reference implementations used only by the test suite.

Everything here deliberately avoids the solver paths used by the package:
regression goes through explicitly formed normal equations with full-pivot
Gaussian elimination, and simplex-constrained balancing goes through
projected gradient descent with a Dykstra projection onto the feasible set.
Slow and simple on purpose.
"""

import numpy as np


# ---------------------------------------------------------------------------
# weighted least squares via normal equations


def full_pivot_solve(A, b):
    """Solve A x = b by Gaussian elimination with full pivoting.

    Raises np.linalg.LinAlgError when a pivot collapses, so callers only feed
    full-rank systems.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    n = A.shape[0]
    col_perm = np.arange(n)
    for k in range(n):
        sub = np.abs(A[k:, k:])
        i_rel, j_rel = np.unravel_index(np.argmax(sub), sub.shape)
        i, j = k + i_rel, k + j_rel
        if A[i, j] == 0.0 or abs(A[i, j]) < 1e-14 * max(1.0, np.abs(A).max()):
            raise np.linalg.LinAlgError("pivot collapsed at step %d" % k)
        A[[k, i], :] = A[[i, k], :]
        b[[k, i]] = b[[i, k]]
        A[:, [k, j]] = A[:, [j, k]]
        col_perm[[k, j]] = col_perm[[j, k]]
        for r in range(k + 1, n):
            m = A[r, k] / A[k, k]
            A[r, k:] -= m * A[k, k:]
            b[r] -= m * b[k]
    x = np.zeros(n)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - A[k, k + 1 :] @ x[k + 1 :]) / A[k, k]
    out = np.zeros(n)
    out[col_perm] = x
    return out


def wls_normal_equations(X, y, weights):
    """Weighted least squares solved from the normal equations.

    Returns (beta, se_first) where se_first is the classical standard error
    of the first coefficient with degrees of freedom rows - columns.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    G = X.T @ (w[:, None] * X)
    c = X.T @ (w * y)
    beta = full_pivot_solve(G, c)
    resid = y - X @ beta
    rss = float(w @ resid**2)
    df = X.shape[0] - X.shape[1]
    ginv_col0 = full_pivot_solve(G, np.eye(X.shape[1])[0])
    se0 = np.sqrt(rss / df * ginv_col0[0]) if df > 0 else float("nan")
    return beta, se0


# ---------------------------------------------------------------------------
# minimum-entropy weights via projected gradient over the simplex


def project_simplex(v):
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort algorithm)."""
    v = np.asarray(v, dtype=float)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u + (1.0 - css) / np.arange(1, n + 1) > 0)[0][-1]
    lam = (1.0 - css[rho]) / (rho + 1.0)
    return np.maximum(v + lam, 0.0)


def dykstra_project(w, C, b, rounds=4000):
    """Dykstra alternating projections onto simplex ∩ {w : C^T w = b}."""
    A = C.T  # (d, n)
    AAt_inv = np.linalg.pinv(A @ A.T)
    x = np.asarray(w, dtype=float).copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(rounds):
        y = project_simplex(x + p)
        p = x + p - y
        x = y + q - A.T @ (AAt_inv @ (A @ (y + q) - b))
        q = y + q - x
        if np.abs(A @ y - b).max() < 1e-13 and np.abs(x - y).max() < 1e-13:
            break
    return x


def entropy_feasible_point(C, b, steps=600, lr=0.05, seed=0):
    """Projected gradient descent on sum(w log w) over the feasible set.

    Returns (w, entropy). Not guaranteed optimal; used as an upper bound
    that the dual solver must beat (within tolerance).
    """
    C = np.asarray(C, dtype=float)
    b = np.asarray(b, dtype=float)
    n = C.shape[0]
    rng = np.random.default_rng(seed)
    w = dykstra_project(np.full(n, 1.0 / n) + 0.01 * rng.standard_normal(n), C, b)
    w = np.clip(w, 1e-12, None)
    w /= w.sum()
    for k in range(steps):
        grad = 1.0 + np.log(np.clip(w, 1e-300, None))
        w = dykstra_project(w - lr / (1 + 0.05 * k) * grad, C, b)
        w = np.clip(w, 0.0, None)
    from scipy.special import xlogy

    return w, float(xlogy(w, w).sum())
