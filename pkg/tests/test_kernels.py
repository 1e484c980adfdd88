import os
import subprocess
import sys

import numpy as np
import pytest

from s2o import kernels

BACKENDS = kernels.backends()


def test_cython_backend_built():
    assert "cython" in BACKENDS, "compiled extension missing; run pip install -e ."


def test_default_backend_is_compiled_when_available():
    assert kernels.BACKEND == ("cython" if "cython" in BACKENDS else "python")


def test_pure_python_switch():
    env = dict(os.environ, S2O_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from s2o import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("seed", range(5))
def test_backends_agree_power_iteration(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((12, 7))
    gram = m.T @ m
    start = rng.standard_normal(7)
    results = {k: mod.power_iteration(gram, start, 1e-12, 5000) for k, mod in BACKENDS.items()}
    top = np.linalg.eigvalsh(gram)[-1]
    for mu, it, ok in results.values():
        assert ok
        assert mu == pytest.approx(top, rel=1e-10)
    vals = [r[0] for r in results.values()]
    assert max(vals) - min(vals) <= 1e-10 * top


def test_power_iteration_reports_non_convergence():
    gram = np.diag([1.0, 0.999999])
    for mod in BACKENDS.values():
        _, it, ok = mod.power_iteration(gram, np.array([1.0, 1.0]), 1e-14, 3)
        assert not ok and it == 3


@pytest.mark.parametrize("seed", range(5))
def test_backends_agree_cholesky_logdet(seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((6, 6))
    spd = g @ g.T + 0.5 * np.eye(6)
    ref = np.linalg.slogdet(spd + 1e-3 * np.eye(6))[1]
    for mod in BACKENDS.values():
        assert mod.cholesky_logdet(spd, 1e-3) == pytest.approx(ref, rel=1e-12)


def test_cholesky_logdet_nan_on_indefinite():
    for mod in BACKENDS.values():
        assert np.isnan(mod.cholesky_logdet(np.diag([1.0, -1.0]), 0.0))


@pytest.mark.parametrize("rows,cols", [(2, 3), (3, 3), (4, 2)])
def test_backends_agree_kron_marginals(rows, cols):
    rng = np.random.default_rng(rows * 10 + cols)
    g = rng.standard_normal((rows * cols, rows * cols))
    r = g @ g.T
    ref = None
    for mod in BACKENDS.values():
        cg, rg = mod.kron_marginals(r, rows, cols)
        assert cg.shape == (cols, cols) and rg.shape == (rows, rows)
        if ref is None:
            ref = (cg, rg)
        np.testing.assert_allclose(cg, ref[0], atol=1e-12)
        np.testing.assert_allclose(rg, ref[1], atol=1e-12)
    # explicit loops as the independent reference
    loops_c = np.array([[sum(r[i * cols + k, i * cols + l] for i in range(rows)) for l in range(cols)]
                        for k in range(cols)])
    loops_r = np.array([[sum(r[i * cols + k, j * cols + k] for k in range(cols)) for j in range(rows)]
                        for i in range(rows)])
    np.testing.assert_allclose(ref[0], loops_c, atol=1e-12)
    np.testing.assert_allclose(ref[1], loops_r, atol=1e-12)
