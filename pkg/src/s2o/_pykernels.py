"""Reference numpy implementations of the hot kernels.

Loaded when the compiled ``_ckernels`` extension is unavailable or when
``S2O_PURE_PYTHON=1`` is set. Signatures must stay identical to the
Cython module.
"""
import numpy as np


def power_iteration(gram, start, tol, max_iter):
    """Dominant eigenpair of a symmetric PSD matrix.

    Returns ``(eigenvalue, iterations, converged)``. Convergence is declared
    when the residual ``||G v - mu v||`` falls below ``tol * mu``.
    """
    gram = np.ascontiguousarray(gram, dtype=np.float64)
    v = np.array(start, dtype=np.float64)
    nrm = np.sqrt(v @ v)
    if nrm == 0.0:
        return 0.0, 0, True
    v /= nrm
    mu = 0.0
    for it in range(1, max_iter + 1):
        w = gram @ v
        mu = float(v @ w)
        if mu <= 0.0:
            # start vector orthogonal to the range, or the matrix is zero
            return max(mu, 0.0), it, bool(np.sqrt(w @ w) == 0.0)
        res = w - mu * v
        if np.sqrt(res @ res) <= tol * mu:
            return mu, it, True
        v = w / np.sqrt(w @ w)
    return mu, max_iter, False


def cholesky_logdet(mat, damping):
    """``2 * sum(log(diag(L)))`` for ``mat + damping*I = L L^T``.

    Returns ``nan`` when the factorization hits a non-positive pivot.
    """
    a = np.array(mat, dtype=np.float64)
    a[np.diag_indices_from(a)] += damping
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return float("nan")
    return float(2.0 * np.log(np.diag(low)).sum())


def kron_marginals(corr, rows, cols):
    """Row/column Gram marginals of a correlation over a row-major ``vec``.

    With ``corr[(i, k), (j, l)] = E[U_ik U_jl]`` (entry ``(i, k)`` stored
    at position ``i*cols + k``) this returns ``(E[U^T U], E[U U^T])`` as
    ``(cols x cols, rows x rows)`` matrices.
    """
    r4 = np.asarray(corr, dtype=np.float64).reshape(rows, cols, rows, cols)
    col_gram = np.einsum("ikil->kl", r4)
    row_gram = np.einsum("ikjk->ij", r4)
    return np.ascontiguousarray(col_gram), np.ascontiguousarray(row_gram)
