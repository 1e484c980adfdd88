"""White-box first-order adversaries (FGM/FGSM, PGD) under l_inf and l_2 balls."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from s2o import autodiff as ad
from s2o.autodiff import Tensor
from s2o.model import LabeledBatch, MlpNetwork, cross_entropy, forward_tensor, predict

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    random_start: bool = True
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError(f"clamp range {self.clamp} is empty")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def fgsm_config(epsilon: float, norm: str = "linf", clamp=None) -> AttackConfig:
    return AttackConfig(norm, epsilon, max(epsilon, 1e-12), 1, False, clamp)


LossFn = Callable[[Tensor], Tensor]


def _default_loss(net: MlpNetwork, batch: LabeledBatch) -> LossFn:
    def loss(x: Tensor) -> Tensor:
        logits, _ = forward_tensor(net, x)
        return cross_entropy(logits, batch.labels)
    return loss


def input_gradient(net: MlpNetwork, x: np.ndarray, loss_fn: LossFn) -> np.ndarray:
    """Gradient of a batch loss with respect to its inputs."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = loss_fn(xt)
    ad.backward(out, [xt])
    return xt.grad


def ascent_direction(g: np.ndarray, norm: str) -> np.ndarray:
    """Steepest-ascent unit direction per row; zero rows stay zero."""
    if norm == "linf":
        return np.sign(g)
    n = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, g / safe, 0.0)


def project(delta, epsilon: float, norm: str) -> np.ndarray:
    """Project perturbations (rows) onto the epsilon ball."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    d = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(d, -epsilon, epsilon)
    if norm != "l2":
        raise ValueError(f"unknown norm {norm!r}")
    rows = d.reshape(1, -1) if d.ndim == 1 else d
    n = np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))
    scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    return (rows * scale).reshape(d.shape)


def _clamp(x, clamp):
    return x if clamp is None else np.clip(x, clamp[0], clamp[1])


def _finalize(x0: np.ndarray, delta: np.ndarray, epsilon: float, norm: str, clamp) -> np.ndarray:
    """``clamp(x0 + delta)``, nudged so the realized ``x_adv - x0`` is inside the
    ball exactly despite rounding in the addition."""
    x = _clamp(x0 + delta, clamp)
    for _ in range(8):
        d = x - x0
        if norm == "linf":
            bad = np.abs(d) > epsilon
            if not bad.any():
                return x
            x = np.where(bad, np.nextafter(x, x0), x)
        else:
            n = np.sqrt(np.sum(d * d, axis=1))
            bad = n > epsilon
            if not bad.any():
                return x
            shrink = np.where(bad, epsilon / np.where(n > 0, n, 1.0) * (1.0 - 4 * np.finfo(float).eps), 1.0)
            x = _clamp(x0 + d * shrink[:, None], clamp)
    return x


def fgm_perturb(net: MlpNetwork, batch: LabeledBatch, epsilon: float, norm: str = "linf",
                clamp=None, loss_fn: LossFn | None = None) -> LabeledBatch:
    """One-step attack: ``eps * sign(grad)`` (l_inf) or ``eps * grad/||grad||`` (l_2)."""
    loss_fn = loss_fn or _default_loss(net, batch)
    g = input_gradient(net, batch.inputs, loss_fn)
    return batch.with_inputs(_finalize(batch.inputs, epsilon * ascent_direction(g, norm), epsilon, norm, clamp))


def random_start(shape, epsilon: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the epsilon ball (l_2 radius ~ eps * U^(1/d))."""
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=shape)
    b, d = shape
    v = rng.standard_normal(shape)
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(b, 1)) ** (1.0 / d)
    return v * radius


def pgd_perturb(net: MlpNetwork, batch: LabeledBatch, config: AttackConfig,
                rng: np.random.Generator | None = None, loss_fn: LossFn | None = None) -> LabeledBatch:
    x0 = batch.inputs
    loss_fn = loss_fn or _default_loss(net, batch)
    if config.random_start and config.epsilon > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        delta = random_start(x0.shape, config.epsilon, config.norm, rng)
        x_adv = _finalize(x0, delta, config.epsilon, config.norm, config.clamp)
    else:
        x_adv = x0.copy()
    for _ in range(config.iterations):
        g = input_gradient(net, x_adv, loss_fn)
        delta = (x_adv - x0) + config.step_size * ascent_direction(g, config.norm)
        delta = project(delta, config.epsilon, config.norm)
        x_adv = _finalize(x0, delta, config.epsilon, config.norm, config.clamp)
    return batch.with_inputs(x_adv)


def perturbation_norms(clean: np.ndarray, adv: np.ndarray, norm: str) -> np.ndarray:
    d = adv - clean
    if norm == "linf":
        return np.abs(d).max(axis=1)
    return np.sqrt(np.sum(d * d, axis=1))


def robust_accuracy(net: MlpNetwork, dataset: LabeledBatch, config: AttackConfig,
                    seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy on attacked inputs; one-iteration configs without random start
    are evaluated with :func:`fgm_perturb`."""
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        part = dataset.subset(slice(start, start + batch_size))
        if config.epsilon == 0:
            x = part.inputs
        elif config.iterations == 1 and not config.random_start and config.step_size >= config.epsilon:
            x = fgm_perturb(net, part, config.epsilon, config.norm, config.clamp).inputs
        else:
            rng = np.random.default_rng([seed, b])
            x = pgd_perturb(net, part, config, rng).inputs
        correct += int(np.sum(predict(net, x) == part.labels))
    return correct / len(dataset)
