import numpy as np
import pytest

from s2o import autodiff as ad
from s2o import training as tr
from s2o.attacks import AttackConfig, pgd_perturb
from s2o.autodiff import Tensor
from s2o.data import synthesize_blobs
from s2o.model import LabeledBatch, cross_entropy, forward_tensor, init_network

EPS = AttackConfig("linf", 0.05, 0.02, 3, True)


@pytest.fixture(scope="module")
def blobs():
    return synthesize_blobs(per_class=40, seed=1)


def _cfg(**kw):
    base = dict(attack=EPS, epochs=2, batch_size=32, lr=0.05)
    base.update(kw)
    return tr.TrainConfig(**base)


# ---------------------------------------------------------------- penalty

@pytest.mark.parametrize("rho", [0.0, 0.3, -0.5, 0.9])
def test_exact_penalty_two_by_two(rho):
    val = tr.layer_penalty(np.array([[1.0, rho], [rho, 1.0]]), "exact").data
    assert val == pytest.approx(2 + 2 * rho ** 2, rel=1e-5)


def test_exact_penalty_whitened_is_width():
    assert tr.layer_penalty(np.eye(5), "exact").data == pytest.approx(5.0, rel=1e-9)


def test_exact_penalty_monotone_in_correlation():
    vals = [tr.layer_penalty(np.array([[1.0, r], [r, 1.0]]), "exact").data for r in (0.8, 0.5, 0.2, 0.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_fast_penalty_is_frobenius_of_correlation():
    m = np.array([[4.0, 1.0], [1.0, 1.0]])
    assert tr.layer_penalty(m, "fast").data == pytest.approx(2 + 2 * 0.25, rel=1e-5)


def test_penalty_dead_layer_errors_with_layer_and_mode():
    with pytest.raises(tr.SingularMomentError, match=r"exact.*layer 2"):
        tr.layer_penalty(np.zeros((3, 3)), "exact", layer=2)


def test_penalty_off_is_zero():
    assert tr.s2o_penalty([None, None], [None, None], "off").data == 0.0


def test_penalty_scales():
    a = Tensor(np.random.default_rng(0).uniform(0, 1, size=(20, 4)))
    posts = [None, a]
    total = tr.s2o_penalty(posts, posts, "fast", "sum").data
    assert tr.s2o_penalty(posts, posts, "fast", "mean").data == pytest.approx(total / 16)
    assert tr.s2o_penalty(posts, posts, "fast", "width").data == pytest.approx(total / 4)


def test_exact_penalty_gradient_two_layer():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, size=(12, 4))
    w0 = rng.standard_normal((3, 4))

    def f(w):
        a = ad.tanh(Tensor(x) @ ad.transpose(w))
        return tr.s2o_penalty([None, a], [None, a], "exact")

    _, (g,) = ad.grad(f, w0)
    fd = ad.finite_difference_gradient(lambda w: f(Tensor(w)).data, w0)
    assert ad.relative_error(g, fd) < 1e-4


# ---------------------------------------------------------------- config / optimizer

def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="strictly increasing"):
        tr.TrainConfig(milestones=(5, 5))
    with pytest.raises(ValueError):
        tr.TrainConfig(method="mart")
    with pytest.raises(ValueError):
        tr.TrainConfig(beta_a=0)


def test_defaults_and_schedule():
    c = tr.TrainConfig(epochs=20)
    assert c.alpha == 0.3 and c.s2o_mode == "fast" and c.trades_inv_lambda == 6.0
    assert c.schedule() == (10, 15)
    assert [c.lr_at(e) for e in (0, 9, 10, 15)] == pytest.approx([0.05, 0.05, 0.005, 0.0005])


def test_optimizer_zero_lr_leaves_weights():
    w = [np.ones((2, 2))]
    opt = tr.SgdMomentum(0.9, 5e-4)
    opt.step(w, [np.full((2, 2), 3.0)], 0.0)
    np.testing.assert_array_equal(w[0], np.ones((2, 2)))


def test_optimizer_momentum_and_decay():
    w = [np.array([1.0])]
    opt = tr.SgdMomentum(0.5, 0.1)
    opt.step(w, [np.array([1.0])], 0.1)  # buf = 1.1
    opt.step(w, [np.array([1.0])], 0.1)  # buf = 0.55 + 1 + 0.1*0.89
    assert w[0][0] == pytest.approx(0.89 - 0.1 * (0.55 + 1.0 + 0.089))


# ---------------------------------------------------------------- steps

def _step(fn, cfg, data, seed=0):
    net = init_network([20, 8, 4], 0)
    opt = tr.SgdMomentum(cfg.momentum, cfg.weight_decay)
    loss = fn(net, data.subset(slice(0, 32)), cfg, opt, np.random.default_rng(seed))
    return net, loss


def test_alpha_zero_is_vanilla_at_bitwise(blobs):
    train, _ = blobs
    a, la = _step(tr.train_step_at, _cfg(alpha=0.0, s2o_mode="fast"), train)
    b, lb = _step(tr.train_step_at, _cfg(alpha=0.3, s2o_mode="off"), train)
    assert la == lb
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)


def test_eps_zero_alpha_zero_is_natural_training(blobs):
    train, _ = blobs
    cfg = _cfg(alpha=0.0, attack=EPS.with_(epsilon=0.0))
    net, loss = _step(tr.train_step_at, cfg, train)
    ref = init_network([20, 8, 4], 0)
    batch = train.subset(slice(0, 32))
    ws = [Tensor(w, requires_grad=True) for w in ref.weights]
    obj = cross_entropy(forward_tensor(ref, batch.inputs, ws)[0], batch.labels)
    ad.backward(obj, ws)
    assert loss == float(obj.data)
    for w, t in zip(net.weights, ws):
        np.testing.assert_array_equal(w, t.data - cfg.lr * (t.grad + cfg.weight_decay * t.data))


def test_penalty_changes_the_step(blobs):
    train, _ = blobs
    a, _ = _step(tr.train_step_at, _cfg(alpha=0.0), train)
    b, _ = _step(tr.train_step_at, _cfg(alpha=0.3), train)
    assert not np.array_equal(a.weights[0], b.weights[0])


@pytest.mark.parametrize("method", ["at", "trades", "avmixup"])
def test_loss_decreases_over_50_steps(method):
    train, _ = synthesize_blobs(per_class=100, spread=0.1, seed=2)
    net = init_network([20, 16, 4], 0)
    cfg = _cfg(method=method, alpha=0.3)
    opt = tr.SgdMomentum(cfg.momentum, cfg.weight_decay)
    step = tr.STEP_FUNCTIONS[method]
    batch = train.subset(slice(0, 64))
    first = step(net, batch, cfg, opt, np.random.default_rng(0))
    for i in range(49):
        last = step(net, batch, cfg, opt, np.random.default_rng(i + 1))
    assert last < first


def test_trades_eps_zero_kl_vanishes(blobs):
    train, _ = blobs
    batch = train.subset(slice(0, 16))
    net = init_network([20, 8, 4], 0)
    cfg = _cfg(method="trades", alpha=0.0, attack=EPS.with_(epsilon=0.0))
    ws = [Tensor(w) for w in net.weights]
    obj = tr.trades_objective(net, ws, batch, batch.with_inputs(batch.inputs.copy()), cfg).data
    ce = cross_entropy(forward_tensor(net, batch.inputs)[0], batch.labels).data
    assert obj == pytest.approx(ce, abs=1e-14)


def test_trades_zero_weight_is_natural_plus_penalty(blobs):
    train, _ = blobs
    batch = train.subset(slice(0, 16))
    net = init_network([20, 8, 4], 0)
    adv = pgd_perturb(net, batch, EPS, np.random.default_rng(0))
    cfg = _cfg(method="trades", trades_inv_lambda=0.0, alpha=0.3)
    ws = [Tensor(w) for w in net.weights]
    logits, posts = forward_tensor(net, batch.inputs, ws)
    _, adv_posts = forward_tensor(net, adv.inputs, ws)
    expect = cross_entropy(logits, batch.labels).data + 0.3 * tr.s2o_penalty(posts, adv_posts, "fast",
                                                                             "mean").data
    assert tr.trades_objective(net, ws, batch, adv, cfg).data == pytest.approx(expect)


def test_smooth_labels_rows_sum_to_one():
    for lam in (0.0, 0.1, 0.5, 1.0):
        y = tr.smooth_labels(np.array([0, 2, 1]), 3, lam)
        np.testing.assert_allclose(y.sum(1), 1.0)
    np.testing.assert_array_equal(tr.smooth_labels(np.array([1]), 3, 1.0), [[0.0, 1.0, 0.0]])


def test_avmixup_beta_one_is_clean(blobs):
    train, _ = blobs
    batch = train.subset(slice(0, 5))
    adv = batch.with_inputs(batch.inputs + 0.1)
    cfg = _cfg(method="avmixup")
    virt, y = tr.avmixup_batch(batch, adv, cfg, 4, np.ones(5))
    np.testing.assert_array_equal(virt, batch.inputs)
    np.testing.assert_allclose(y, tr.smooth_labels(batch.labels, 4, cfg.lambda1))


def test_avmixup_printed_vs_anchored(blobs):
    train, _ = blobs
    batch = train.subset(slice(0, 5))
    adv = batch.with_inputs(batch.inputs + 0.1)
    printed, _ = tr.avmixup_batch(batch, adv, _cfg(), 4, np.zeros(5))
    anchored, _ = tr.avmixup_batch(batch, adv, _cfg(avmixup_anchor=True), 4, np.zeros(5))
    np.testing.assert_allclose(printed, np.full_like(printed, 0.2))
    np.testing.assert_allclose(anchored, batch.inputs + 0.2)


def test_awp_zero_radius_is_identity(blobs):
    train, _ = blobs
    a, la = _step(tr.train_step_at, _cfg(awp=False), train)
    b, lb = _step(tr.train_step_at, _cfg(awp=True, gamma_awp=0.0), train)
    assert la == lb
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)


def test_awp_projection_and_restore(blobs):
    train, _ = blobs
    net = init_network([20, 8, 4], 0)
    before = [w.copy() for w in net.weights]
    adv = train.subset(slice(0, 32))
    with tr.awp_wrap(net, adv, 0.01, steps=3) as v:
        for vl, w in zip(v, before):
            assert np.linalg.norm(vl) <= 0.01 * np.linalg.norm(w) + 1e-12
        for wl, b, vl in zip(net.weights, before, v):
            np.testing.assert_allclose(wl, b + vl)
    for wl, b in zip(net.weights, before):
        np.testing.assert_array_equal(wl, b)
    with pytest.raises(ValueError):
        with tr.awp_wrap(net, adv, -1.0):
            pass


def test_awp_ascends_on_trained_net(blobs):
    train, test = blobs
    res = tr.run_training(_cfg(epochs=5, alpha=0.0), train, test, dims=[20, 16, 4])
    net = res.net
    ups = 0
    for b in range(8):
        batch = train.subset(slice(b * 16, (b + 1) * 16))
        adv = pgd_perturb(net, batch, EPS, np.random.default_rng(b))
        base = cross_entropy(forward_tensor(net, adv.inputs)[0], adv.labels).data
        with tr.awp_wrap(net, adv, 0.01):
            shifted = cross_entropy(forward_tensor(net, adv.inputs)[0], adv.labels).data
        ups += shifted >= base
    assert ups / 8 >= 0.9


# ---------------------------------------------------------------- loop

def test_run_training_reproducible(blobs, tmp_path):
    train, test = blobs
    cfg = _cfg(epochs=3)
    a = tr.run_training(cfg, train, test, dims=[20, 8, 4], out_dir=tmp_path / "a", checkpoint_every=1)
    b = tr.run_training(cfg, train, test, dims=[20, 8, 4], out_dir=tmp_path / "b", checkpoint_every=1)
    assert a.history == b.history
    assert [r["epoch"] for r in a.history] == [1, 2, 3]
    assert len(a.checkpoints) == 3
    for row in a.history:
        assert 0 <= row["clean_acc"] <= 1 and 0 <= row["robust_acc"] <= 1


def test_non_finite_loss_aborts_with_last_good(blobs, tmp_path, monkeypatch):
    train, test = blobs
    calls = {"n": 0}
    real = tr.train_step_at

    def flaky(net, batch, config, optimizer=None, rng=None, lr=None):
        calls["n"] += 1
        if calls["n"] > 3:
            raise tr.NonFiniteLossError("at: non-finite objective nan")
        return real(net, batch, config, optimizer, rng, lr)

    monkeypatch.setitem(tr.STEP_FUNCTIONS, "at", flaky)
    res = tr.run_training(_cfg(epochs=3, batch_size=64), train, test, dims=[20, 8, 4], out_dir=tmp_path)
    assert res.aborted and "non-finite" in res.error
    assert len(res.history) == 1
    assert (tmp_path / "last_good.s2ow").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_objective_detected():
    net = init_network([2, 2], 0)
    net.weights[0][:] = np.inf
    batch = LabeledBatch(np.ones((2, 2)), np.array([0, 1]))
    with pytest.raises(tr.NonFiniteLossError):
        tr.train_step_at(net, batch, _cfg(alpha=0.0, attack=EPS.with_(epsilon=0.0)))
