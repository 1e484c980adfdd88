"""Backend selection for the hot kernels.

The compiled extension is preferred; set ``S2O_PURE_PYTHON=1`` to force
the numpy fallback (used by the benchmark and the backend-parity tests).
"""
import os

from s2o import _pykernels

_ckernels = None
if os.environ.get("S2O_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from s2o import _ckernels
    except ImportError:  # extension not built
        _ckernels = None

_impl = _ckernels if _ckernels is not None else _pykernels
BACKEND = "cython" if _ckernels is not None else "python"

power_iteration = _impl.power_iteration
cholesky_logdet = _impl.cholesky_logdet
kron_marginals = _impl.kron_marginals


def backends():
    """Mapping of every importable backend name to its module."""
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    else:
        try:
            from s2o import _ckernels as ck
            out["cython"] = ck
        except ImportError:
            pass
    return out
