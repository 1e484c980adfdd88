"""Linear-algebra kernels: spectral norm, SPD log-determinant and inverse."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from s2o import kernels

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10000
DAMPING_SCALE = 1e-6
EIGH_MAX_DIM = 256


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SpectralResult:
    value: float
    iterations: int
    converged: bool

    def __float__(self):
        return self.value


def spectral_norm(mat, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                  seed: int = 0) -> SpectralResult:
    """Largest singular value by power iteration on the smaller Gram matrix.

    The start vector is drawn from ``seed``, so repeated calls are exact
    replicas. ``converged`` is False when ``max_iter`` ran out first.
    """
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"spectral_norm expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("spectral_norm: matrix has non-finite entries")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if m.size == 0:
        return SpectralResult(0.0, 0, True)
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    start = np.random.default_rng(seed).standard_normal(gram.shape[0])
    mu, iters, ok = kernels.power_iteration(gram, start, tol, max_iter)
    return SpectralResult(float(np.sqrt(max(mu, 0.0))), int(iters), bool(ok))


def default_damping(mat) -> float:
    """``1e-6 * trace / dim``, the factor-wise damping used before inversion."""
    m = np.asarray(mat)
    return DAMPING_SCALE * float(np.trace(m)) / m.shape[0]


def log_det_spd(mat, damping: float = 0.0) -> float:
    """``log det(M + damping*I)`` through a Cholesky factor."""
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"log_det_spd expects a square matrix, got shape {m.shape}")
    if damping < 0:
        raise ValueError("damping must be non-negative")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise ValueError("log_det_spd: matrix is not symmetric")
    out = kernels.cholesky_logdet(m, float(damping))
    if not np.isfinite(out):
        raise NotPositiveDefiniteError(
            f"log_det_spd: Cholesky failed with damping {damping:g}; input is not positive definite")
    return float(out)


def spd_inverse(mat, damping: float | None = None) -> np.ndarray:
    """Inverse of ``M + damping*I`` (default damping from :func:`default_damping`)."""
    m = np.asarray(mat, dtype=np.float64)
    lam = default_damping(m) if damping is None else damping
    a = m + lam * np.eye(m.shape[0])
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            f"spd_inverse: factorization failed after damping {lam:g}") from None
    inv_low = np.linalg.solve(low, np.eye(m.shape[0]))
    out = inv_low.T @ inv_low
    return 0.5 * (out + out.T)


def sym_extreme_eigenvalues(mat) -> tuple[float, float]:
    """``(lambda_min, lambda_max)`` of a symmetric matrix.

    Full eigensolve up to ``EIGH_MAX_DIM``; beyond that, power iteration for
    the top and shifted power iteration for the bottom of the spectrum.
    """
    m = np.asarray(mat, dtype=np.float64)
    if m.shape[0] <= EIGH_MAX_DIM:
        w = np.linalg.eigvalsh(m)
        return float(w[0]), float(w[-1])
    start = np.random.default_rng(0).standard_normal(m.shape[0])
    top, _, _ = kernels.power_iteration(m, start, DEFAULT_TOL, DEFAULT_MAX_ITER)
    shifted = top * np.eye(m.shape[0]) - m
    low, _, _ = kernels.power_iteration(shifted, start, DEFAULT_TOL, DEFAULT_MAX_ITER)
    return float(top - low), float(top)


def normalize_to_correlation(cov) -> np.ndarray:
    """``C_ij / sqrt(C_ii C_jj)`` with the diagonal set to exactly one."""
    c = np.asarray(cov, dtype=np.float64)
    d = np.diag(c)
    if np.any(~(d > 0)):
        bad = int(np.flatnonzero(~(d > 0))[0])
        raise ValueError(f"normalize_to_correlation: non-positive diagonal entry at index {bad}")
    s = 1.0 / np.sqrt(d)
    out = c * s[:, None] * s[None, :]
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out
