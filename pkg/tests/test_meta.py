import numpy as np
import pytest

from atu import autodiff as ad
from atu.autodiff import Tensor
from atu.meta import (
    MetaModel,
    adv_loss,
    evaluate,
    init_model,
    inner_adapt,
    meta_gradients,
    meta_step,
    task_losses,
)
from atu.tasks import Task, TaskBatch, sample_meta_test_set, sample_sine_tasks, sine_task, SineParams
from atu.verify import maml_fd_error, numeric_grad, rel_error


def linear_model(w=1.0, alpha=0.01):
    # single layer y = w x with zero bias: a (1, 1) network
    return MetaModel({"w0": Tensor([[w]], requires_grad=True), "b0": Tensor([0.0], requires_grad=True)}, alpha, None, (1, 1))


def test_inner_adapt_linear_hand_value():
    m = linear_model()
    phi = inner_adapt(m, np.array([[1.0]]), np.array([[0.0]]))
    assert phi["w0"].data.reshape(()) == pytest.approx(0.98, abs=1e-15)


def test_inner_adapt_fixed_points():
    m = linear_model(w=2.0)
    x = np.array([[1.0], [3.0]])
    phi = inner_adapt(m, x, 2.0 * x)
    assert phi["w0"].data.reshape(()) == 2.0
    m = init_model(np.random.default_rng(0), alpha=0.5, metasgd=True)
    for r in m.inner_rates.values():
        r.data = np.zeros_like(r.data)
    t = sample_sine_tasks(np.random.default_rng(1), 1)[0]
    phi = inner_adapt(m, t.support_x, t.support_y)
    assert all(np.array_equal(phi[k].data[0], m.params[k].data) for k in m.params)


def test_empty_support_rejected():
    m = linear_model()
    with pytest.raises(ValueError):
        inner_adapt(m, np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        meta_step(m, TaskBatch(np.zeros((0, 1, 1)), np.zeros((0, 1, 1)), np.zeros((0, 1, 1)), np.zeros((0, 1, 1))), ad.adam())


def test_zero_meta_gradient_leaves_theta():
    # every task is fit exactly by theta, so the query loss is flat at theta
    m = linear_model(w=2.0)
    x = np.linspace(-1, 1, 6).reshape(2, 3, 1)
    batch = TaskBatch(x, 2.0 * x, x[:, ::-1], 2.0 * x[:, ::-1])
    before = m.snapshot()
    meta_step(m, batch, ad.adam(1e-3))
    after = m.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_linear_meta_gradient_matches_fd():
    def objective(w, b=0.0):
        # x=1, y=0: both w and b step by -alpha * 2 (w + b)
        r = w + b
        pred = (w - 0.02 * r) + (b - 0.02 * r)
        return pred * pred

    m = linear_model(w=1.3)
    batch = TaskBatch(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
    _, grads = meta_gradients(m, batch)
    num = (objective(1.3 + 1e-5) - objective(1.3 - 1e-5)) / 2e-5
    assert grads["theta/w0"][0, 0] == pytest.approx(num, rel=1e-4)


def test_full_maml_gradient_matches_fd():
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert maml_fd_error(rng) < 1e-4


def test_second_order_path_is_used():
    m = init_model(np.random.default_rng(0))
    batch = TaskBatch.stack(sample_sine_tasks(np.random.default_rng(1), 2))
    _, g2 = meta_gradients(m, batch, create_graph=True)
    _, g1 = meta_gradients(m, batch, create_graph=False)
    assert any(not np.array_equal(g2[k], g1[k]) for k in g2)


def test_metasgd_with_frozen_rates_matches_maml():
    m = init_model(np.random.default_rng(0), alpha=0.01)
    s = init_model(np.random.default_rng(0), alpha=0.01, metasgd=True)
    batch = TaskBatch.stack(sample_sine_tasks(np.random.default_rng(1), 3))
    _, gm = meta_gradients(m, batch)
    _, gs = meta_gradients(s, batch)
    for k in m.params:
        assert np.array_equal(gm[f"theta/{k}"], gs[f"theta/{k}"])


def test_meta_training_reduces_loss():
    m = init_model(np.random.default_rng(0))
    opt = ad.adam(1e-3)
    rng = np.random.default_rng(1)
    losses = [meta_step(m, TaskBatch.stack(sample_sine_tasks(rng, 4)), opt) for _ in range(500)]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_evaluate_examples():
    # the (1,1) linear model y = x is exact for the task y = x
    m = linear_model(w=1.0)
    x = np.linspace(-1, 1, 5)[:, None]
    t = Task(x, x.copy(), x, x.copy())
    rep = evaluate(m, [t] * 3)
    assert rep.mean == 0.0
    model = init_model(np.random.default_rng(0))
    tasks = sample_meta_test_set(np.random.default_rng(2), k=10, n_tasks=7)
    one = evaluate(model, tasks[:1])
    assert one.half_width == 0.0 and one.n == 1
    rep = evaluate(model, tasks)
    per = [evaluate(model, [t]).mean for t in tasks]
    assert rep.mean == pytest.approx(np.mean(per), abs=1e-12)
    rev = evaluate(model, tasks[::-1])
    assert rev.mean == pytest.approx(rep.mean, abs=1e-12)
    with pytest.raises(ValueError):
        evaluate(model, [])
    with pytest.raises(ValueError):
        evaluate(model, tasks, k=11)


def test_adv_loss_examples():
    m = init_model(np.random.default_rng(0))
    t = sample_sine_tasks(np.random.default_rng(1), 1, k_support=5, k_query=5)[0]
    assert adv_loss(m, t.support_x, t.support_y, t.query_x, t.query_y, 0.0, 0.0).data[0] == 0.0
    eta1, eta2 = 0.3, 0.7
    v = adv_loss(m, t.support_x, t.support_y, t.support_x, t.support_y, eta1, eta2).data[0]
    theta = {k: Tensor(p.data, requires_grad=True) for k, p in m.params.items()}
    ls = task_losses({k: Tensor(p.data[None]) for k, p in theta.items()}, t.support_x[None], t.support_y[None], m)
    keys = list(theta)
    tb = {k: ad.broadcast_to(theta[k], (1,) + theta[k].shape) for k in keys}
    l0 = ad.reduce_sum(task_losses(tb, t.support_x[None], t.support_y[None], m))
    gs = ad.grad(l0, [theta[k] for k in keys])
    sq = sum(float(np.sum(g.data**2)) for g in gs)
    phi = inner_adapt(m, t.support_x, t.support_y)
    lq = task_losses(phi, t.support_x[None], t.support_y[None], m).data[0]
    assert v == pytest.approx(eta1 * lq - eta2 * sq, rel=1e-12)
    assert ls.data[0] > 0


def test_adv_loss_grad_wrt_y_matches_fd():
    m = init_model(np.random.default_rng(0), arch=(1, 6, 6, 1))
    rng = np.random.default_rng(3)
    for p in m.params.values():
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    sx, qx = rng.uniform(-5, 5, (4, 1)), rng.uniform(-5, 5, (4, 1))
    sy0, qy0 = rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
    sy, qy = Tensor(sy0, requires_grad=True), Tensor(qy0, requires_grad=True)
    out = ad.reduce_sum(adv_loss(m, sx, sy, qx, qy, 0.8, 0.4))
    ga, gb = ad.grad(out, [sy, qy])

    def f(arrs):
        return float(adv_loss(m, sx, arrs[0], qx, arrs[1], 0.8, 0.4).data.sum())

    na, nb = numeric_grad(f, [sy0.copy(), qy0.copy()])
    assert rel_error(ga.data, na) < 1e-3 and rel_error(gb.data, nb) < 1e-3


def test_adv_loss_does_not_touch_model():
    m = init_model(np.random.default_rng(0))
    t = sample_sine_tasks(np.random.default_rng(1), 1)[0]
    sy = Tensor(t.support_y, requires_grad=True)
    out = ad.reduce_sum(adv_loss(m, t.support_x, sy, t.query_x, t.query_y, 1.0, 1.0))
    gs = ad.grad(out, list(m.params.values()))
    assert all(np.array_equal(g.data, np.zeros_like(g.data)) for g in gs)


def test_cross_entropy_nonnegative_and_zero_only_at_onehot():
    m = MetaModel({"w0": Tensor(np.eye(3) * 1e3), "b0": Tensor(np.zeros(3))}, 0.01, None, (3, 3), "ce")
    x = np.eye(3)[None]
    y = np.arange(3)[None]
    assert task_losses(m.params, x, y, m).data[0] == pytest.approx(0.0, abs=1e-300)
    m2 = MetaModel({"w0": Tensor(np.random.default_rng(0).normal(size=(3, 3))), "b0": Tensor(np.zeros(3))}, 0.01, None, (3, 3), "ce")
    assert task_losses(m2.params, x, y, m2).data[0] > 0


def test_inner_adapt_refuses_no_grad():
    rng = np.random.default_rng(0)
    model = init_model(rng, (1, 8, 1), alpha=0.01)
    batch = TaskBatch.stack(sample_sine_tasks(rng, 2, k_support=5, k_query=5))
    with ad.no_grad(), pytest.raises(RuntimeError):
        inner_adapt(model, batch.support_x, batch.support_y, 1, False)
