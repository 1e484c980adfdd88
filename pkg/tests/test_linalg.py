import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import jacobi_singular_values, lu_determinant
from s2o import linalg


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_spectral_norm_matches_jacobi_svd(r, c, seed):
    m = np.random.default_rng(seed).standard_normal((r, c))
    res = linalg.spectral_norm(m, tol=1e-12)
    oracle = jacobi_singular_values(m)[0]
    if res.converged:
        assert res.value == pytest.approx(oracle, rel=1e-6)
    else:
        assert res.value <= oracle * (1 + 1e-12)


def test_spectral_norm_examples():
    assert linalg.spectral_norm(np.eye(3)).value == pytest.approx(1.0)
    assert linalg.spectral_norm(np.array([[3.0, 0.0], [0.0, 4.0]])).value == pytest.approx(4.0)
    zero = linalg.spectral_norm(np.zeros((3, 2)))
    assert zero.value == 0.0 and zero.converged


def test_spectral_norm_is_seeded():
    m = np.random.default_rng(0).standard_normal((8, 5))
    assert linalg.spectral_norm(m, seed=3).value == linalg.spectral_norm(m, seed=3).value


def test_spectral_norm_rejects_bad_input():
    with pytest.raises(ValueError):
        linalg.spectral_norm(np.ones(3))
    with pytest.raises(ValueError):
        linalg.spectral_norm(np.array([[np.nan]]))


def test_spectral_norm_flags_budget_exhaustion():
    m = np.diag([1.0, 1.0 - 1e-9, 0.5])
    res = linalg.spectral_norm(m, tol=1e-15, max_iter=2)
    assert not res.converged and res.iterations == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_log_det_matches_lu_oracle(n, seed):
    g = np.random.default_rng(seed).standard_normal((n, n))
    spd = g @ g.T + np.eye(n)
    assert linalg.log_det_spd(spd) == pytest.approx(np.log(lu_determinant(spd)), abs=1e-9)


def test_log_det_errors():
    with pytest.raises(linalg.NotPositiveDefiniteError):
        linalg.log_det_spd(np.diag([1.0, 0.0]))
    with pytest.raises(ValueError, match="symmetric"):
        linalg.log_det_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        linalg.log_det_spd(np.ones((2, 3)))
    assert linalg.log_det_spd(np.diag([1.0, 0.0]), damping=1.0) == pytest.approx(np.log(2.0))


def test_spd_inverse_default_damping():
    m = np.diag([2.0, 4.0])
    lam = 1e-6 * 3.0
    np.testing.assert_allclose(linalg.spd_inverse(m), np.diag([1 / (2 + lam), 1 / (4 + lam)]))
    with pytest.raises(linalg.NotPositiveDefiniteError):
        linalg.spd_inverse(np.diag([1.0, -5.0]))


def test_extreme_eigenvalues_large_path_matches_eigh():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((300, 300))
    m = g @ g.T / 300 + np.eye(300)
    lo, hi = linalg.sym_extreme_eigenvalues(m)
    w = np.linalg.eigvalsh(m)
    assert hi == pytest.approx(w[-1], rel=1e-6)
    assert lo == pytest.approx(w[0], rel=1e-4)


def test_normalize_to_correlation():
    c = np.array([[4.0, 2.0], [2.0, 9.0]])
    r = linalg.normalize_to_correlation(c)
    np.testing.assert_allclose(r, [[1.0, 1 / 3], [1 / 3, 1.0]])
    assert np.all(np.diag(r) == 1.0)
    with pytest.raises(ValueError, match="index 1"):
        linalg.normalize_to_correlation(np.diag([1.0, 0.0]))
