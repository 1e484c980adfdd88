"""Adversarial training loops (AT, TRADES, AVMixup, AWP) with the S2O penalty."""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from s2o import autodiff as ad
from s2o.attacks import AttackConfig, pgd_perturb
from s2o.autodiff import Tensor
from s2o.linalg import DAMPING_SCALE, spd_inverse, normalize_to_correlation
from s2o.model import (LabeledBatch, MlpNetwork, accuracy, cross_entropy, forward_tensor, init_network,
                       kl_softmax, one_hot, save_checkpoint, soft_cross_entropy)

METHODS = ("at", "trades", "avmixup")
S2O_MODES = ("exact", "fast", "off")
S2O_SCALES = ("sum", "width", "mean")


class NonFiniteLossError(FloatingPointError):
    pass


class SingularMomentError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "at"
    awp: bool = False
    alpha: float = 0.3
    s2o_mode: str = "fast"
    attack: AttackConfig = field(default_factory=AttackConfig)
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] | None = None
    decay: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    trades_inv_lambda: float = 6.0
    gamma_av: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    beta_a: float = 1.0
    beta_b: float = 1.0
    avmixup_anchor: bool = False
    gamma_awp: float = 5e-3
    awp_steps: int = 1
    s2o_scale: str = "mean"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.s2o_mode not in S2O_MODES:
            raise ValueError(f"s2o_mode must be one of {S2O_MODES}, got {self.s2o_mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ms = self.schedule()
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if self.method == "trades" and not self.trades_inv_lambda >= 0:
            raise ValueError("trades_inv_lambda must be non-negative")
        if not (self.beta_a > 0 and self.beta_b > 0):
            raise ValueError("beta distribution parameters must be positive")
        if self.gamma_awp < 0:
            raise ValueError("gamma_awp must be non-negative")
        if self.s2o_scale not in S2O_SCALES:
            raise ValueError(f"s2o_scale must be one of {S2O_SCALES}")

    def schedule(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return tuple(int(m) for m in self.milestones)
        half, three_q = self.epochs // 2, (3 * self.epochs) // 4
        return tuple(sorted({m for m in (half, three_q) if 0 < m < self.epochs}))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        drops = sum(epoch >= m for m in self.schedule())
        return self.lr * self.decay ** drops

    @property
    def penalty_active(self) -> bool:
        return self.alpha > 0 and self.s2o_mode != "off"

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.schedule())
        d["attack"]["clamp"] = list(self.attack.clamp) if self.attack.clamp else None
        return d


# ---------------------------------------------------------------- S2O penalty

def second_moment(a: Tensor) -> Tensor:
    return (a.T @ a) * (1.0 / a.shape[0])


def _damped(moment: Tensor) -> Tensor:
    n = moment.shape[0]
    lam = ad.tsum(ad.diag(moment)) * (DAMPING_SCALE / n)
    return moment + lam * np.eye(n)


def _normalize(m: Tensor) -> Tensor:
    s = ad.diag(m) ** -0.5
    n = m.shape[0]
    return ad.reshape(s, (n, 1)) * m * ad.reshape(s, (1, n))


def layer_penalty(moment, mode: str = "exact", layer: int | None = None) -> Tensor:
    """Frobenius^2 of the normalized (inverse, in exact mode) damped moment."""
    moment = ad.as_tensor(moment)
    where = f"layer {layer}" if layer is not None else "layer"
    if not np.trace(moment.data) > 0:
        raise SingularMomentError(f"s2o_penalty[{mode}]: {where} second moment is zero (dead layer)")
    m = _damped(moment)
    if mode == "exact":
        if np.linalg.cond(m.data) > 1e14:
            raise SingularMomentError(f"s2o_penalty[exact]: {where} second moment singular beyond damping")
        m = ad.inverse(m)
    elif mode != "fast":
        raise ValueError(f"unknown s2o mode {mode!r}")
    return ad.frobenius_sq(_normalize(m))


def s2o_penalty(clean_posts, adv_posts, mode: str = "fast", scale: str = "sum") -> Tensor:
    """``g(A)`` summed over both domains and all hidden layers.

    ``*_posts`` are the post-activation lists from :func:`forward_tensor`;
    the input layer is skipped because it carries no weight dependence.
    """
    if mode == "off":
        return Tensor(np.array(0.0))
    total = None
    for posts in (clean_posts, adv_posts):
        for l, a in enumerate(posts[1:], start=1):
            term = layer_penalty(second_moment(a), mode, l)
            if scale != "sum":
                h = a.shape[1]
                term = term * (1.0 / (h if scale == "width" else h * h))
            total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


def penalty_value(net: MlpNetwork, clean: LabeledBatch, adv: LabeledBatch | None = None,
                  mode: str = "exact") -> float:
    """Dataset-level ``sum_l ||A_norm||_F^2`` (numpy, no graph)."""
    total = 0.0
    for data in (clean, adv) if adv is not None else (clean,):
        _, posts = forward_tensor(net, data.inputs)
        for a in posts[1:]:
            m = a.data.T @ a.data / a.shape[0]
            if mode == "exact":
                m = spd_inverse(m)
            else:
                m = m + DAMPING_SCALE * np.trace(m) / m.shape[0] * np.eye(m.shape[0])
            total += float(np.sum(normalize_to_correlation(m) ** 2))
    return total


# ---------------------------------------------------------------- optimizer

class SgdMomentum:
    """Heavy-ball SGD with coupled weight decay (``g + wd*w`` feeds the buffer)."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray] | None = None

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if self.buffers is None:
            self.buffers = [np.zeros_like(w) for w in weights]
        for w, g, buf in zip(weights, grads, self.buffers):
            d = g + self.weight_decay * w
            buf *= self.momentum
            buf += d
            w -= lr * buf


# ---------------------------------------------------------------- steps

def smooth_labels(labels, num_classes: int, lam: float) -> np.ndarray:
    """``lam * onehot(y) + (1 - lam) / C``."""
    return lam * one_hot(labels, num_classes) + (1.0 - lam) / num_classes


def _adversarial(net, batch, attack: AttackConfig, rng, loss_fn=None) -> LabeledBatch:
    if attack.epsilon == 0:
        return batch.with_inputs(batch.inputs.copy())
    return pgd_perturb(net, batch, attack, rng, loss_fn)


def _check_finite(value: float, what: str):
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{what}: non-finite objective {value}")


@contextlib.contextmanager
def awp_wrap(net: MlpNetwork, adv_batch: LabeledBatch, gamma_awp: float, steps: int = 1):
    """Shift ``net``'s weights to ``W + V`` for the duration of the block.

    ``V`` comes from ``steps`` normalized ascent steps on the adversarial
    cross-entropy, each layer projected onto ``||V_l|| <= gamma * ||W_l||``.
    Yields the list of ``V_l``; the original weights are restored on exit.
    """
    if gamma_awp < 0:
        raise ValueError("gamma_awp must be non-negative")
    base = [w.copy() for w in net.weights]
    radii = [gamma_awp * float(np.linalg.norm(w)) for w in base]
    v = [np.zeros_like(w) for w in base]
    if gamma_awp > 0:
        for _ in range(steps):
            ws = [Tensor(b + d, requires_grad=True) for b, d in zip(base, v)]
            logits, _ = forward_tensor(net, adv_batch.inputs, ws)
            ad.backward(cross_entropy(logits, adv_batch.labels), ws)
            for l, (w, r) in enumerate(zip(ws, radii)):
                g = w.grad
                gn = float(np.linalg.norm(g))
                if gn > 0:
                    v[l] = v[l] + r * g / gn
                vn = float(np.linalg.norm(v[l]))
                if vn > r:
                    v[l] = v[l] * (r / vn)
    net.weights = [b + d for b, d in zip(base, v)]
    try:
        yield v
    finally:
        net.weights = base


def _apply(ws, objective, what):
    value = float(objective.data)
    _check_finite(value, what)
    ad.backward(objective, ws)
    grads = [w.grad for w in ws]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"{what}: non-finite gradient")
    return value, grads


def _step(net: MlpNetwork, batch: LabeledBatch, adv: LabeledBatch, config: TrainConfig, build,
          optimizer: SgdMomentum | None, lr: float, what: str) -> float:
    """Evaluate ``build(ws)`` (optionally at ``W + V``), then update ``W``."""
    ctx = awp_wrap(net, adv, config.gamma_awp, config.awp_steps) if config.awp else contextlib.nullcontext()
    with ctx:
        ws = [Tensor(w, requires_grad=True) for w in net.weights]
        value, grads = _apply(ws, build(ws), what)
    if optimizer is not None:
        optimizer.step(net.weights, grads, lr)
    return value


def _with_penalty(objective, config, clean_posts, adv_posts):
    if not config.penalty_active:
        return objective
    return objective + config.alpha * s2o_penalty(clean_posts, adv_posts, config.s2o_mode, config.s2o_scale)


def at_objective(net: MlpNetwork, ws, batch: LabeledBatch, adv: LabeledBatch, config: TrainConfig) -> Tensor:
    """``CE(f(s'), y) + alpha * g(A)`` at weights ``ws``."""
    logits, posts = forward_tensor(net, adv.inputs, ws)
    obj = cross_entropy(logits, adv.labels)
    if not config.penalty_active:
        return obj
    return _with_penalty(obj, config, forward_tensor(net, batch.inputs, ws)[1], posts)


def trades_objective(net: MlpNetwork, ws, batch: LabeledBatch, adv: LabeledBatch,
                     config: TrainConfig) -> Tensor:
    """``CE(f(s), y) + (1/lambda) KL(f(s) || f(s')) + alpha * g(A)``."""
    logits, posts = forward_tensor(net, batch.inputs, ws)
    adv_logits, adv_posts = forward_tensor(net, adv.inputs, ws)
    obj = cross_entropy(logits, batch.labels)
    if config.trades_inv_lambda > 0:
        obj = obj + config.trades_inv_lambda * kl_softmax(logits, adv_logits)
    return _with_penalty(obj, config, posts, adv_posts)


def avmixup_batch(batch: LabeledBatch, adv: LabeledBatch, config: TrainConfig, num_classes: int,
                  beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Virtual inputs and soft labels for per-sample mixing weights ``beta``."""
    b = np.asarray(beta, dtype=np.float64).reshape(-1, 1)
    s, s_adv = batch.inputs, adv.inputs
    if config.avmixup_anchor:
        virt = b * s + (1.0 - b) * (s + config.gamma_av * (s_adv - s))
    else:
        virt = b * s + (1.0 - b) * config.gamma_av * (s_adv - s)
    y = (b * smooth_labels(batch.labels, num_classes, config.lambda1)
         + (1.0 - b) * smooth_labels(batch.labels, num_classes, config.lambda2))
    return virt, y


def avmixup_objective(net: MlpNetwork, ws, batch: LabeledBatch, adv: LabeledBatch, virt, soft,
                      config: TrainConfig) -> Tensor:
    logits, _ = forward_tensor(net, virt, ws)
    obj = soft_cross_entropy(logits, soft)
    if not config.penalty_active:
        return obj
    clean_posts = forward_tensor(net, batch.inputs, ws)[1]
    adv_posts = forward_tensor(net, adv.inputs, ws)[1]
    return _with_penalty(obj, config, clean_posts, adv_posts)


def train_step_at(net: MlpNetwork, batch: LabeledBatch, config: TrainConfig,
                  optimizer: SgdMomentum | None = None, rng=None, lr: float | None = None) -> float:
    """One PGD adversarial-training step; returns the objective value."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    adv = _adversarial(net, batch, config.attack, rng)
    return _step(net, batch, adv, config, lambda ws: at_objective(net, ws, batch, adv, config),
                 optimizer, config.lr if lr is None else lr, "at")


def train_step_trades(net: MlpNetwork, batch: LabeledBatch, config: TrainConfig,
                      optimizer: SgdMomentum | None = None, rng=None, lr: float | None = None) -> float:
    """Inner PGD maximizes ``KL(f(s) || f(s'))``, then one step on the TRADES objective."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    clean_logits = forward_tensor(net, batch.inputs)[0].data

    def kl_loss(x):
        return kl_softmax(clean_logits, forward_tensor(net, x)[0])

    adv = _adversarial(net, batch, config.attack, rng, kl_loss)
    return _step(net, batch, adv, config, lambda ws: trades_objective(net, ws, batch, adv, config),
                 optimizer, config.lr if lr is None else lr, "trades")


def train_step_avmixup(net: MlpNetwork, batch: LabeledBatch, config: TrainConfig,
                       optimizer: SgdMomentum | None = None, rng=None, lr: float | None = None) -> float:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    adv = _adversarial(net, batch, config.attack, rng)
    beta = rng.beta(config.beta_a, config.beta_b, size=len(batch))
    virt, soft = avmixup_batch(batch, adv, config, net.num_classes, beta)
    return _step(net, batch, adv, config,
                 lambda ws: avmixup_objective(net, ws, batch, adv, virt, soft, config),
                 optimizer, config.lr if lr is None else lr, "avmixup")


STEP_FUNCTIONS = {"at": train_step_at, "trades": train_step_trades, "avmixup": train_step_avmixup}


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    net: MlpNetwork
    history: list[dict]
    aborted: bool = False
    error: str | None = None
    checkpoints: list[str] = field(default_factory=list)


def evaluate(net: MlpNetwork, test: LabeledBatch, eval_attack: AttackConfig, seed: int,
             mode: str = "exact") -> dict:
    from s2o.attacks import robust_accuracy
    from s2o.statistics import attacked_dataset
    out = {"clean_acc": accuracy(net, test),
           "robust_acc": robust_accuracy(net, test, eval_attack, seed=seed)}
    adv = attacked_dataset(net, test, eval_attack, seed) if eval_attack.epsilon > 0 else None
    try:
        out["s2o_penalty_value"] = penalty_value(net, test, adv, mode)
    except np.linalg.LinAlgError:
        out["s2o_penalty_value"] = float("nan")
    return out


def correlation_diagnostics(net: MlpNetwork, data: LabeledBatch) -> dict:
    """Laplace-estimated ``sum_l ||R'_l||_2`` and ``sum_l log det R_l`` on ``data``."""
    from s2o.statistics import laplace_estimate
    est = laplace_estimate(net, data)
    return {"sum_rprime_norm": float(sum(layer.marginal_norms()[0] for layer in est.layers)),
            "sum_logdet_r": float(sum(layer.logdet() for layer in est.layers))}


def run_training(config: TrainConfig, train: LabeledBatch, test: LabeledBatch | None = None,
                 dims=None, activation: str = "relu", eval_attack: AttackConfig | None = None,
                 out_dir=None, checkpoint_every: int = 0, diagnostics: bool = False,
                 net: MlpNetwork | None = None) -> TrainResult:
    """Train from scratch (or from ``net``) and record one metrics row per epoch.

    Every random draw comes from generators keyed on ``(seed, epoch, batch)``,
    so two runs with the same config produce identical histories.
    """
    if net is None:
        if dims is None:
            raise ValueError("need dims or an initial network")
        net = init_network(dims, config.seed, activation)
    test = test if test is not None else train
    eval_attack = eval_attack or config.attack.with_(iterations=20)
    step_fn = STEP_FUNCTIONS[config.method]
    opt = SgdMomentum(config.momentum, config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(net, [])
    good = net.copy()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        losses = []
        try:
            for b, start in enumerate(range(0, len(train), config.batch_size)):
                batch = train.subset(order[start:start + config.batch_size])
                rng = np.random.default_rng([config.seed, epoch, b])
                losses.append(step_fn(net, batch, config, opt, rng, lr))
        except (NonFiniteLossError, SingularMomentError) as exc:
            net.weights = [w.copy() for w in good.weights]
            result.aborted, result.error = True, f"epoch {epoch + 1}: {exc}"
            break
        good = net.copy()
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        row.update(evaluate(net, test, eval_attack, config.seed))
        if diagnostics:
            row.update(correlation_diagnostics(net, test))
        row["checkpoint"] = ""
        if out is not None and (epoch + 1 == config.epochs
                                or (checkpoint_every and (epoch + 1) % checkpoint_every == 0)):
            path = save_checkpoint(net, out / f"epoch_{epoch + 1:04d}.s2ow",
                                   {"epoch": epoch + 1, "seed": config.seed, "method": config.method})
            row["checkpoint"] = path.name
            result.checkpoints.append(str(path))
        result.history.append(row)
    if result.aborted and out is not None:
        path = save_checkpoint(net, out / "last_good.s2ow", {"aborted": result.error})
        result.checkpoints.append(str(path))
    return result
