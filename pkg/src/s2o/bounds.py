"""Ingredients of the adversarial PAC-Bayes bound with correlated weight noise.

The complexity term assembled by :func:`corollary_bound` drops the
unspecified universal constants (``c1 = c2 = 1``, no big-O prefactor), so it
is a comparator across models and checkpoints, never a certificate.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from s2o import autodiff as ad
from s2o.attacks import AttackConfig, pgd_perturb
from s2o.autodiff import Tensor
from s2o.linalg import NotPositiveDefiniteError, spectral_norm
from s2o.model import LabeledBatch, MlpNetwork, cross_entropy, forward_tensor
from s2o.statistics import CorrelationEstimate, LayerCorrelation

KAPPA_FLOOR = 1e-8


class VacuousBoundError(ValueError):
    """Smallest correlation eigenvalue is not positive."""


@dataclass
class BoundInputs:
    spectral: list[float]
    frobenius: list[float]
    num_samples: int
    input_norm: float
    epsilon: float
    kappa: float
    gamma: float = 1.0
    delta: float = 0.05
    sigma: float = 1.0
    sigma_convention: str = "uniform"
    attack_model: str = "fgm"
    pgm_iterations: int = 10
    pgm_step: float = 0.0
    width: int | None = None

    def __post_init__(self):
        if any(s < 0 for s in self.spectral) or any(f < 0 for f in self.frobenius):
            raise ValueError("norms must be non-negative")
        if self.epsilon > 0 and not self.kappa > 0:
            raise ValueError("kappa must be positive when epsilon > 0")
        if self.num_samples < 2:
            raise ValueError("need m >= 2 samples")
        if self.attack_model not in ("fgm", "pgm"):
            raise ValueError(f"unknown attack model {self.attack_model!r}")
        if self.sigma_convention not in ("uniform", "spectral"):
            raise ValueError(f"unknown sigma convention {self.sigma_convention!r}")

    @property
    def n(self) -> int:
        return len(self.spectral)

    @classmethod
    def from_network(cls, net: MlpNetwork, **kw) -> "BoundInputs":
        spec = [spectral_norm(w).value for w in net.weights]
        frob = [float(np.linalg.norm(w)) for w in net.weights]
        kw.setdefault("width", max(net.dims[1:-1], default=net.dims[0]))
        return cls(spec, frob, **kw)


def _check_spectral(spectral):
    for l, s in enumerate(spectral):
        if s == 0:
            raise ValueError(f"layer {l + 1} has zero spectral norm (degenerate layer)")


def lipschitz_bar(spectral) -> float:
    """``prod ||W_l||_2 * sum_l prod_{j<=l} ||W_j||_2``."""
    s = np.asarray(spectral, dtype=np.float64)
    return float(np.prod(s) * np.sum(np.cumprod(s)))


def _frob_ratio(spectral, frobenius) -> float:
    s, f = np.asarray(spectral, dtype=np.float64), np.asarray(frobenius, dtype=np.float64)
    return float(np.sum(f * f / (s * s)))


def phi_adv_fgm(spectral, frobenius, epsilon: float, kappa: float) -> float:
    _check_spectral(spectral)
    s = np.asarray(spectral, dtype=np.float64)
    ratio = epsilon / kappa if epsilon > 0 else 0.0
    braces = 1.0 + ratio * lipschitz_bar(s)
    return float(np.prod(s * s) * braces ** 2 * _frob_ratio(s, frobenius))


def geometric_factor(ratio: float, terms: int) -> float:
    """``sum_{t<terms} ratio^t``; the closed form only while ``ratio < 1``."""
    if terms < 1:
        raise ValueError("terms must be >= 1")
    if ratio < 1.0:
        return (1.0 - ratio ** terms) / (1.0 - ratio)
    return float(sum(ratio ** t for t in range(terms)))


def phi_adv_pgm(spectral, frobenius, step: float, kappa: float, iterations: int) -> float:
    _check_spectral(spectral)
    s = np.asarray(spectral, dtype=np.float64)
    lip = lipschitz_bar(s)
    ratio = step / kappa if step > 0 else 0.0
    geo = geometric_factor(2.0 * ratio * lip, iterations)
    braces = np.prod(s) * (1.0 + ratio * geo * lip)
    return float(braces ** 2 * _frob_ratio(s, frobenius))


def phi_adv(inputs: BoundInputs) -> float:
    if inputs.attack_model == "pgm":
        return phi_adv_pgm(inputs.spectral, inputs.frobenius, inputs.pgm_step, inputs.kappa,
                           inputs.pgm_iterations)
    return phi_adv_fgm(inputs.spectral, inputs.frobenius, inputs.epsilon, inputs.kappa)


def layer_sigmas(spectral, sigma: float, convention: str = "uniform") -> list[float]:
    """Per-layer noise scales: uniform, or ``sigma * ||W_l||_2 / geomean(||W||_2)``."""
    s = np.asarray(spectral, dtype=np.float64)
    if convention == "uniform":
        return [float(sigma)] * len(s)
    if convention != "spectral":
        raise ValueError(f"unknown sigma convention {convention!r}")
    beta = float(np.exp(np.mean(np.log(s))))
    return [float(sigma * x / beta) for x in s]


def kl_term(frobenius, correlations, sigma: float = 1.0, convention: str = "uniform",
            spectral=None) -> float:
    """``sum_l ||W_l||_F^2 / (2 sigma_l^2) - log det R_l``.

    ``correlations`` is a :class:`CorrelationEstimate`, a list of layers, or a
    list of dense matrices.
    """
    layers = correlations.layers if isinstance(correlations, CorrelationEstimate) else correlations
    sig = layer_sigmas(spectral if spectral is not None else [1.0] * len(frobenius), sigma, convention)
    total = 0.0
    for f, s, r in zip(frobenius, sig, layers):
        if isinstance(r, LayerCorrelation):
            ld = r.logdet()
        else:
            from s2o.linalg import log_det_spd
            ld = log_det_spd(np.asarray(r))
        if not np.isfinite(ld):
            raise NotPositiveDefiniteError("kl_term: correlation matrix is singular")
        total += f * f / (2.0 * s * s) - ld
    return float(total)


@dataclass
class LayerLambdas:
    lambda_prime_max: float
    lambda_dprime_max: float
    lambda_min: float
    lambda_max: float
    dim: int


def lambda_extremes(clean: CorrelationEstimate, adv: CorrelationEstimate) -> list[LayerLambdas]:
    if len(clean.layers) != len(adv.layers):
        raise ValueError("estimates have different layer counts")
    out = []
    for lc, la in zip(clean.layers, adv.layers):
        if (lc.rows, lc.cols) != (la.rows, la.cols):
            raise ValueError(f"layer shape mismatch {(lc.rows, lc.cols)} vs {(la.rows, la.cols)}")
        pc, ppc = lc.marginal_norms()
        pa, ppa = la.marginal_norms()
        (mn_c, mx_c), (mn_a, mx_a) = lc.extreme_eigenvalues(), la.extreme_eigenvalues()
        out.append(LayerLambdas(math.sqrt(max(pc, pa)), math.sqrt(max(ppc, ppa)),
                                min(mn_c, mn_a), max(mx_c, mx_a), lc.dim))
    return out


def det_exponent(lambda_min: float, lambda_max: float, dim: int) -> float:
    """``k = (d*Lmax - d) / (Lmax - Lmin)``."""
    if lambda_max == lambda_min:
        return 0.0
    return (dim * lambda_max - dim) / (lambda_max - lambda_min)


def log_det_lower_bound(lambda_min: float, lambda_max: float, dim: int) -> float:
    if not lambda_min > 0:
        raise VacuousBoundError(f"lambda_min = {lambda_min:g} <= 0: determinant bound is vacuous")
    if lambda_max < lambda_min:
        raise ValueError("lambda_max < lambda_min")
    if lambda_max == lambda_min:
        return dim * math.log(lambda_max)
    k = det_exponent(lambda_min, lambda_max, dim)
    return k * math.log(lambda_min) + (dim - k) * math.log(lambda_max)


def det_lower_bound(lambda_min: float, lambda_max: float, dim: int) -> float:
    """``Lmin^k Lmax^(d-k)``, evaluated in log space."""
    return math.exp(log_det_lower_bound(lambda_min, lambda_max, dim))


@dataclass
class BoundReport:
    phi_adv: float
    psi_adv: float
    kl_term: float
    layers: list[dict]
    marginal_sum: float
    log_det_bound_sum: float
    complexity: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def all_finite(self) -> bool:
        vals = [self.phi_adv, self.psi_adv, self.kl_term, self.marginal_sum, self.log_det_bound_sum,
                self.complexity]
        for layer in self.layers:
            vals.extend(v for v in layer.values() if isinstance(v, float))
        return all(math.isfinite(v) for v in vals)


def complexity_term(psi: float, lambdas: list[LayerLambdas], num_samples: int, gamma: float, delta: float,
                    c1: float = 1.0, c2: float = 1.0) -> tuple[float, float, float]:
    """Returns ``(complexity, marginal_sum, sum log det bound)``."""
    marg = sum(c1 * x.lambda_prime_max + c2 * x.lambda_dprime_max for x in lambdas)
    logdet = sum(log_det_lower_bound(x.lambda_min, x.lambda_max, x.dim) for x in lambdas)
    inner = psi * marg ** 2 + math.log(num_samples / delta) - logdet
    return math.sqrt(inner) / (gamma * math.sqrt(num_samples)), marg, logdet


def corollary_bound(inputs: BoundInputs, clean: CorrelationEstimate, adv: CorrelationEstimate) -> BoundReport:
    phi = phi_adv(inputs)
    psi = (inputs.input_norm + inputs.epsilon) ** 2 * phi
    lambdas = lambda_extremes(clean, adv)
    comp, marg, logdet = complexity_term(psi, lambdas, inputs.num_samples, inputs.gamma, inputs.delta)
    try:
        kl = kl_term(inputs.frobenius, adv, inputs.sigma, inputs.sigma_convention, inputs.spectral)
    except (NotPositiveDefiniteError, np.linalg.LinAlgError):
        kl = float("inf")
    layers = []
    for x in lambdas:
        k = det_exponent(x.lambda_min, x.lambda_max, x.dim)
        ld = log_det_lower_bound(x.lambda_min, x.lambda_max, x.dim)
        layers.append({"lambda_prime_max": x.lambda_prime_max, "lambda_dprime_max": x.lambda_dprime_max,
                       "lambda_min": x.lambda_min, "lambda_max": x.lambda_max, "dim": x.dim,
                       "k": float(k), "log_det_bound": ld, "det_bound": math.exp(ld)})
    meta = {
        "kind": "relative comparator (universal constants dropped), not a certified bound",
        "c1": 1.0, "c2": 1.0, "attack_model": inputs.attack_model,
        "sigma_convention": inputs.sigma_convention, "sigma": inputs.sigma,
        "q_convention": "eliminated via max/min over clean and adversarial domains",
        "estimator_tag": f"{clean.estimator_tag}/{adv.estimator_tag}",
        "kl_domain": adv.domain_tag, "num_samples": inputs.num_samples, "input_norm": inputs.input_norm, "epsilon": inputs.epsilon,
        "kappa": inputs.kappa, "gamma": inputs.gamma, "delta": inputs.delta,
    }
    return BoundReport(phi, psi, kl, layers, marg, logdet, comp, meta)


def mixture_correlation(clean: np.ndarray, adv: np.ndarray, clean_weight: float = 0.5) -> np.ndarray:
    """Diagnostic only: the weighted average of a clean and an adversarial dense correlation."""
    return clean_weight * np.asarray(clean) + (1.0 - clean_weight) * np.asarray(adv)


def _per_sample_grad_norms(net: MlpNetwork, data: LabeledBatch) -> np.ndarray:
    x = Tensor(data.inputs, requires_grad=True)
    logits, _ = forward_tensor(net, x)
    total = cross_entropy(logits, data.labels) * float(len(data))
    ad.backward(total, [x])
    return np.linalg.norm(x.grad, axis=1)


def estimate_kappa_and_norm(net: MlpNetwork, dataset: LabeledBatch, attack: AttackConfig | None = None,
                            seed: int = 0) -> tuple[float, float, bool]:
    """``(kappa, input_norm, degenerate)``: min input-gradient norm over clean and
    attacked inputs (floored at 1e-8) and max clean input norm."""
    input_norm = float(np.max(np.linalg.norm(dataset.inputs, axis=1)))
    norms = [_per_sample_grad_norms(net, dataset)]
    if attack is not None and attack.epsilon > 0:
        adv = pgd_perturb(net, dataset, attack, np.random.default_rng(seed))
        norms.append(_per_sample_grad_norms(net, adv))
    kappa = float(np.min(np.concatenate(norms)))
    degenerate = kappa < KAPPA_FLOOR
    return max(kappa, KAPPA_FLOOR), input_norm, degenerate
