"""Finite-difference audit of every autodiff primitive and training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from s2o import autodiff as ad
from s2o.attacks import AttackConfig, pgd_perturb
from s2o.autodiff import Tensor, finite_difference_gradient, relative_error
from s2o.model import LabeledBatch, forward_tensor, init_network
from s2o import training as tr

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} cases={self.cases:<4} max_rel_err={self.max_rel_error:.2e}"


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _shape(rng, ndim=2):
    return tuple(int(v) for v in rng.integers(2, 5, size=ndim))


def _spd(rng, n):
    g = rng.standard_normal((n, n))
    return g @ g.T / n + np.eye(n)


# name -> (input generator, function of tensors)
def _primitive_cases():
    def pair(rng):
        s = _shape(rng)
        return [rng.standard_normal(s), rng.standard_normal(s)]

    def bcast_pair(rng):
        s = _shape(rng)
        return [rng.standard_normal(s), rng.standard_normal((1, s[1]))]

    def single(rng):
        return [rng.standard_normal(_shape(rng))]

    def positive(rng):
        return [rng.uniform(0.5, 2.0, size=_shape(rng))]

    def mm(rng):
        a, b, c = (int(v) for v in rng.integers(2, 5, size=3))
        return [rng.standard_normal((a, b)), rng.standard_normal((b, c))]

    def square(rng):
        return [_spd(rng, int(rng.integers(2, 5)))]

    return {
        "add": (bcast_pair, lambda a, b: a + b),
        "sub": (pair, lambda a, b: a - b),
        "mul": (bcast_pair, lambda a, b: a * b),
        "div": (lambda r: [r.standard_normal(s := _shape(r)), r.uniform(0.5, 2.0, s)], lambda a, b: a / b),
        "neg": (single, lambda a: -a),
        "pow": (positive, lambda a: a ** 1.7),
        "matmul": (mm, lambda a, b: a @ b),
        "transpose": (single, lambda a: ad.transpose(a)),
        "reshape": (single, lambda a: ad.reshape(a, (-1,))),
        "relu": (lambda r: [_away_from_zero(r, _shape(r))], ad.relu),
        "tanh": (single, ad.tanh),
        "exp": (single, ad.exp),
        "log": (positive, ad.log),
        "sqrt": (positive, ad.sqrt),
        "sum": (single, lambda a: ad.tsum(a, axis=0)),
        "mean": (single, lambda a: ad.mean(a, axis=1)),
        "softmax": (single, ad.softmax),
        "log_softmax": (single, ad.log_softmax),
        "frobenius_sq": (single, ad.frobenius_sq),
        "inverse": (square, ad.inverse),
        "diag": (square, ad.diag),
    }


def check_primitive(name: str, cases: int = 100, seed: int = 0) -> CheckResult:
    make, fn = _primitive_cases()[name]
    worst = 0.0
    for c in range(cases):
        rng = np.random.default_rng([seed, c])
        arrays = make(rng)
        probe = fn(*[Tensor(x) for x in arrays])
        weight = rng.standard_normal(probe.shape)

        def scalar(*ts):
            return ad.tsum(fn(*ts) * weight)

        _, grads = ad.grad(scalar, *arrays)
        for i, x in enumerate(arrays):
            def f(xi, i=i):
                args = [Tensor(a) for a in arrays]
                args[i] = Tensor(xi)
                return scalar(*args).data
            worst = max(worst, relative_error(grads[i], finite_difference_gradient(f, x)))
    return CheckResult(name, cases, worst)


# ---------------------------------------------------------------- composites

def _tiny_problem(seed: int):
    rng = np.random.default_rng(seed)
    net = init_network([4, 3, 3, 2], seed, activation="tanh")
    batch = LabeledBatch(rng.uniform(0, 1, size=(8, 4)), rng.integers(0, 2, size=8))
    attack = AttackConfig("linf", 0.1, 0.04, 3, True)
    adv = pgd_perturb(net, batch, attack, rng)
    return net, batch, adv, rng


def _objective_builders(net, batch, adv, rng):
    base = tr.TrainConfig(alpha=0.3, s2o_mode="off")
    beta = rng.beta(1.0, 1.0, size=len(batch))
    virt, soft = tr.avmixup_batch(batch, adv, base, net.num_classes, beta)
    with tr.awp_wrap(net, adv, 0.05, 1) as v:
        shift = [x.copy() for x in v]
    return {
        "at": lambda ws: tr.at_objective(net, ws, batch, adv, base),
        "trades": lambda ws: tr.trades_objective(net, ws, batch, adv, base),
        "avmixup": lambda ws: tr.avmixup_objective(net, ws, batch, adv, virt, soft, base),
        "awp_at": lambda ws: tr.at_objective(net, [w + d for w, d in zip(ws, shift)], batch, adv, base),
        "s2o_exact": lambda ws: tr.at_objective(net, ws, batch, adv, base.with_(s2o_mode="exact")),
        "s2o_fast": lambda ws: tr.at_objective(net, ws, batch, adv, base.with_(s2o_mode="fast")),
        "trades_s2o_exact": lambda ws: tr.trades_objective(net, ws, batch, adv, base.with_(s2o_mode="exact")),
        "avmixup_s2o_fast": lambda ws: tr.avmixup_objective(net, ws, batch, adv, virt, soft,
                                                            base.with_(s2o_mode="fast")),
    }


COMPOSITES = ("at", "trades", "avmixup", "awp_at", "s2o_exact", "s2o_fast", "trades_s2o_exact",
              "avmixup_s2o_fast")


def check_composite(name: str, cases: int = 5, seed: int = 0) -> CheckResult:
    worst = 0.0
    for c in range(cases):
        net, batch, adv, rng = _tiny_problem(1000 * seed + c)
        build = _objective_builders(net, batch, adv, rng)[name]
        ws = [Tensor(w.copy(), requires_grad=True) for w in net.weights]
        ad.backward(build(ws), ws)
        sizes = [w.size for w in net.weights]
        flat = np.concatenate([w.reshape(-1) for w in net.weights])

        def f(theta):
            parts = np.split(theta, np.cumsum(sizes)[:-1])
            return build([Tensor(p.reshape(w.shape)) for p, w in zip(parts, net.weights)]).data

        analytic = np.concatenate([w.grad.reshape(-1) for w in ws])
        worst = max(worst, relative_error(analytic, finite_difference_gradient(f, flat)))
    return CheckResult(name, cases, worst)


def run_suite(primitive_cases: int = 100, composite_cases: int = 5, seed: int = 0) -> list[CheckResult]:
    out = [check_primitive(n, primitive_cases, seed) for n in _primitive_cases()]
    out += [check_composite(n, composite_cases, seed) for n in COMPOSITES]
    return out
