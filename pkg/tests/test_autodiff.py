import numpy as np
import pytest
from hypothesis import given, strategies as st

from atu import autodiff as ad
from atu.autodiff import Tensor
from atu.verify import check_hvp, numeric_grad, primitive_cases, primitive_fd_error, rel_error


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_forward_examples():
    assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    assert ad.reduce_sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0


def test_grad_square_and_third_derivative():
    x = t(3.0)
    (g,) = ad.grad(x * x, [x])
    assert g.item() == 6.0
    x = t(2.0)
    (g,) = ad.grad(x**3, [x], create_graph=True)
    (gg,) = ad.grad(g, [x])
    assert gg.item() == pytest.approx(12.0, abs=1e-12)


def test_unused_input_gets_zero_grad():
    x, y = t([1.0, 2.0]), t([[5.0]])
    gx, gy = ad.grad(ad.reduce_sum(x * x), [x, y])
    assert np.array_equal(gy.data, np.zeros((1, 1)))
    assert np.array_equal(gx.data, [2.0, 4.0])


def test_grad_requires_scalar():
    x = t([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.grad(x * 2.0, [x])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_subgradient_at_zero():
    x = t([0.0])
    (g,) = ad.grad(ad.reduce_sum(ad.relu(x)), [x])
    assert g.data[0] == 0.0


def test_clip_values_and_gradient():
    x = t([-2.0, -0.5, 0.3, 1.0, 4.0])
    y = ad.clip(x, -1.0, 1.0)
    assert np.array_equal(y.data, [-1.0, -0.5, 0.3, 1.0, 1.0])
    (g,) = ad.grad(ad.reduce_sum(y), [x])
    assert np.array_equal(g.data, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 1))
    params = [rng.normal(size=(3, 8)), rng.normal(size=(8,)), rng.normal(size=(8, 1)), rng.normal(size=(1,))]

    def loss(ps):
        h = ad.relu(ad.matmul(Tensor(x), ps[0]) + ps[1])
        d = ad.matmul(h, ps[2]) + ps[3] - Tensor(y)
        return ad.mean(d * d)

    ts = [t(p) for p in params]
    grads = ad.grad(loss(ts), ts)
    for i, g in enumerate(grads):
        def f(v, i=i):
            ps = [Tensor(p) for p in params]
            ps[i] = Tensor(v)
            return loss(ps).item()

        assert rel_error(g.data, numeric_grad(lambda xs: f(xs[0]), [params[i].copy()])[0]) < 1e-4


@pytest.mark.parametrize("name", sorted(primitive_cases(np.random.default_rng(0))))
def test_every_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert primitive_fd_error(name, rng) < 1e-4


def test_hessian_vector_product():
    assert check_hvp().passed


def test_sgd_and_adam_examples():
    p = {"p": Tensor(np.array(1.0))}
    ad.step(ad.sgd(0.1), p, {"p": np.array(2.0)})
    assert p["p"].item() == pytest.approx(0.8, abs=1e-15)

    p = {"p": Tensor(np.array([0.5, -2.0]))}
    opt = ad.adam()
    for _ in range(10):
        ad.step(opt, p, {"p": np.zeros(2)})
    assert np.array_equal(p["p"].data, [0.5, -2.0])

    p = {"p": Tensor(np.array(0.0))}
    ad.step(ad.adam(1e-3), p, {"p": np.array(1.0)})
    # m_hat = 1, v_hat = 1 -> -lr * 1 / (1 + eps)
    assert p["p"].item() == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_step_rejects_misaligned_and_nonfinite():
    p = {"p": Tensor(np.zeros(2))}
    with pytest.raises(ValueError):
        ad.step(ad.sgd(0.1), p, {"p": np.zeros(3)})
    with pytest.raises(FloatingPointError):
        ad.step(ad.sgd(0.1), p, {"p": np.array([np.nan, 0.0])})


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 2)))

    def f(x):
        return ad.reduce_sum(ad.sin(ad.matmul(x, w)))

    def g(x):
        return ad.mean(ad.exp(x * 0.3) * x)

    x = t(x0)
    (combined,) = ad.grad(f(x) * a + g(x) * b, [x])
    (gf,) = ad.grad(f(x), [x])
    (gg,) = ad.grad(g(x), [x])
    assert np.allclose(combined.data, a * gf.data + b * gg.data, rtol=1e-12, atol=1e-12)


def test_determinism():
    def once():
        rng = np.random.default_rng(7)
        x = t(rng.normal(size=(5, 3)))
        w = t(rng.normal(size=(3, 3)))
        out = ad.reduce_sum(ad.softmax(ad.matmul(x, w)) * ad.log(ad.exp(x) + 1.0))
        return out.data, [g.data for g in ad.grad(out, [x, w])]

    a, b = once(), once()
    assert np.array_equal(a[0], b[0])
    assert all(np.array_equal(u, v) for u, v in zip(a[1], b[1]))


def test_no_grad_builds_no_graph():
    x = t([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
