"""Monte-Carlo checks of the equicorrelation closed forms and the
Frobenius-norm trends of random correlation matrices."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from s2o.bounds import det_lower_bound
from s2o.linalg import normalize_to_correlation
from s2o.statistics import kronecker_marginals_dense

GENERATORS = ("wishart", "equicorrelated", "identity")
OVERSAMPLE = 2
CSV_HEADER = ("frob_sq", "lambda_prime_max", "lambda_dprime_max", "det_bound")


@dataclass(frozen=True)
class SimConfig:
    dim: int = 9
    count: int = 10000
    generator: str = "wishart"
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        width = math.isqrt(self.dim)
        if width * width != self.dim or width < 2:
            raise ValueError(f"dim must be a perfect square >= 4, got {self.dim}")
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")

    @property
    def width(self) -> int:
        return math.isqrt(self.dim)


def random_correlation_matrix(h_sq: int, seed) -> np.ndarray:
    """Normalized Gram matrix of an ``h_sq x 2*h_sq`` standard-normal factor."""
    if h_sq < 2:
        raise ValueError("h_sq must be >= 2")
    g = np.random.default_rng(seed).standard_normal((h_sq, OVERSAMPLE * h_sq))
    return normalize_to_correlation(g @ g.T)


def equicorrelated(dim: int, rho: float) -> np.ndarray:
    return (1.0 - rho) * np.eye(dim) + rho * np.ones((dim, dim))


def equicorrelation_c(dim: int, rho: float) -> float:
    """``det`` of the equicorrelated matrix: ``(1-rho)^(d-1) (1+(d-1) rho)``."""
    return (1.0 - rho) ** (dim - 1) * (1.0 + (dim - 1) * rho)


def _check_rho(width: int, rho: float):
    lo = -1.0 / (width * width - 1)
    if not lo < rho < 1.0:
        raise ValueError(f"r = {rho} outside the valid range ({lo:.6g}, 1) for width {width}")


def equicorrelation_quantities(width: int, rho_clean: float, rho_adv: float) -> tuple[float, float, float]:
    """Closed-form ``(Lambda'_max, Lambda''_max, c)`` for equicorrelated clean and
    adversarial correlations of a ``width x width`` layer; both must share a sign."""
    if width < 2:
        raise ValueError("width must be >= 2")
    for rho in (rho_clean, rho_adv):
        _check_rho(width, rho)
    if rho_clean * rho_adv < 0:
        raise ValueError(
            f"mixed-sign pair ({rho_clean}, {rho_adv}): the closed forms assume both "
            "correlations are non-negative or both non-positive")
    if rho_clean >= 0 and rho_adv >= 0:
        lam = math.sqrt(width * (1.0 + (width - 1) * max(rho_clean, rho_adv)))
    else:
        lam = math.sqrt(width * (1.0 - min(rho_clean, rho_adv)))
    dominant = rho_clean if abs(rho_clean) >= abs(rho_adv) else rho_adv
    return lam, lam, equicorrelation_c(width * width, dominant)


def matrix_quantities(corr: np.ndarray) -> tuple[float, float, float, float]:
    """``(||R||_F^2, Lambda'_max, Lambda''_max, det bound)`` of one correlation matrix."""
    dim = corr.shape[0]
    col_gram, row_gram = kronecker_marginals_dense(corr)
    lp = math.sqrt(float(np.linalg.eigvalsh(col_gram)[-1]))
    lpp = math.sqrt(float(np.linalg.eigvalsh(row_gram)[-1]))
    w = np.linalg.eigvalsh(corr)
    return float(np.sum(corr * corr)), lp, lpp, det_lower_bound(float(w[0]), float(w[-1]), dim)


def _generate(config: SimConfig, i: int) -> np.ndarray:
    if config.generator == "identity":
        return np.eye(config.dim)
    if config.generator == "equicorrelated":
        lo = -1.0 / (config.dim - 1)
        r = lo + (0.95 - lo) * (i + 0.5) / config.count
        return equicorrelated(config.dim, r)
    return random_correlation_matrix(config.dim, [config.seed, i])


def _spearman(x, y):
    x, y = np.asarray(x), np.asarray(y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(spearmanr(x, y).statistic)


def scatter_experiment(config: SimConfig) -> dict:
    """Rows of matrix quantities plus Spearman rank correlations against ``||R||_F^2``.

    Writes ``<out>`` (CSV) and ``<out>.summary.json`` when ``config.out`` is set.
    Undefined correlations (constant columns) are reported as ``None``.
    """
    rows = np.array([matrix_quantities(_generate(config, i)) for i in range(config.count)])
    summary = {
        "config": asdict(config),
        "generator_detail": f"normalized Gram of h^2 x {OVERSAMPLE}h^2 Gaussian factor"
        if config.generator == "wishart" else config.generator,
        "spearman": {name: _spearman(rows[:, 0], rows[:, j]) for j, name in enumerate(CSV_HEADER) if j},
        "count": config.count,
    }
    if config.out:
        path = Path(config.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in rows:
                writer.writerow([repr(float(v)) for v in row])
        Path(str(path) + ".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    summary["rows"] = rows
    return summary


def lemma_trend_check(width: int, rho_grid) -> dict:
    """Monotonicity of the closed forms in ``|r|`` over a single-sign grid."""
    grid = sorted({float(r) for r in rho_grid}, key=abs)
    if any(r < 0 for r in grid) and any(r > 0 for r in grid):
        raise ValueError("r grid must be single-sign")
    for r in grid:
        _check_rho(width, r)
    vals = [equicorrelation_quantities(width, r, r) for r in grid]
    pairs = []
    for (r0, v0), (r1, v1) in zip(zip(grid, vals), zip(grid[1:], vals[1:])):
        pairs.append({"r_from": r0, "r_to": r1,
                      "lambda_prime_nondecreasing": v1[0] >= v0[0],
                      "c_nonincreasing": v1[2] <= v0[2]})
    ok = all(p["lambda_prime_nondecreasing"] and p["c_nonincreasing"] for p in pairs)
    return {"width": width, "grid": grid, "pairs": pairs, "passed": ok}
