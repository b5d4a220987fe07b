import numpy as np
import pytest

from mibounds import autodiff as ad
from mibounds._numerics import as_rng, logmeanexp, logsumexp, mean_and_se, softmax
from conftest import fd_grad, rel_err


def test_logsumexp_large_inputs_do_not_overflow():
    a = np.array([700.0, 699.0, -700.0])
    ref = 700.0 + np.log1p(np.exp(-1.0) + np.exp(-1400.0))
    assert logsumexp(a) == pytest.approx(ref, rel=1e-15)
    assert np.isfinite(logsumexp(-a))


def test_logsumexp_all_neg_inf():
    assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf


def test_logmeanexp_identical_entries_exact():
    a = np.full((3, 7), 0.123456789)
    assert np.all(logmeanexp(a, axis=-1) == 0.123456789)


def test_softmax_sums_to_one():
    p = softmax(np.array([[1.0, 2.0, 700.0], [-5.0, 0.0, 5.0]]), axis=-1)
    assert np.allclose(p.sum(-1), 1.0)


def test_mean_and_se():
    m, se = mean_and_se(np.array([1.0, 2.0, 3.0, 4.0]))
    assert m == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_as_rng_passthrough_and_seed():
    g = np.random.default_rng(0)
    assert as_rng(g) is g
    assert as_rng(5).normal() == np.random.default_rng(5).normal()


UNARY = {
    "exp": ad.exp, "log": lambda v: ad.log(v), "relu": ad.relu, "tanh": ad.tanh,
    "softplus": ad.softplus, "square": ad.square, "neg": ad.neg,
    "power": lambda v: ad.power(v, 3.0), "sum": lambda v: ad.sum(v, axis=0),
    "mean": lambda v: ad.mean(v, axis=1, keepdims=True), "logsumexp": ad.logsumexp,
    "logmeanexp": ad.logmeanexp, "reshape": lambda v: ad.reshape(v, (6,)),
    "getitem": lambda v: ad.getitem(v, (slice(None), [0, 2])),
    "broadcast": lambda v: ad.broadcast_to(v, (4, 2, 3)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name, rng):
    x0 = rng.uniform(0.3, 2.0, size=(2, 3))
    if name == "relu":
        x0 = x0 * np.array([1, -1, 1])
    w = rng.normal(size=np.shape(UNARY[name](x0)) if not isinstance(UNARY[name](x0), ad.Var) else None)

    def f_np(x):
        return float(np.sum(np.asarray(UNARY[name](x)) * w))

    val, (g,) = ad.value_and_grad(lambda v: ad.sum(ad.mul(UNARY[name](v), w)), x0)
    assert val == pytest.approx(f_np(x0), rel=1e-12)
    assert rel_err(g, fd_grad(f_np, x0)) <= 1e-5


BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div,
          "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (3, 2))) if isinstance(b, ad.Var)
          else ad.matmul(a, np.reshape(b, (3, 2))),
          "concat": lambda a, b: ad.concatenate([a, b], axis=-1)}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name, rng):
    a0 = rng.uniform(0.5, 2.0, size=(2, 3))
    b0 = rng.uniform(0.5, 2.0, size=(2, 3))
    fn = BINARY[name]
    w = rng.normal(size=np.shape(np.asarray(fn(a0, b0))))

    def f_np(a, b):
        return float(np.sum(np.asarray(fn(a, b)) * w))

    _, (ga, gb) = ad.value_and_grad(lambda a, b: ad.sum(ad.mul(fn(a, b), w)), a0, b0)
    assert rel_err(ga, fd_grad(lambda a: f_np(a, b0), a0)) <= 1e-5
    assert rel_err(gb, fd_grad(lambda b: f_np(a0, b), b0)) <= 1e-5


def test_broadcasting_gradient_unbroadcasts(rng):
    a0 = rng.normal(size=(4, 3))
    b0 = rng.normal(size=(3,))
    _, (ga, gb) = ad.value_and_grad(lambda a, b: ad.sum(ad.mul(a, b)), a0, b0)
    assert gb.shape == (3,)
    assert np.allclose(gb, a0.sum(0))
    assert np.allclose(ga, np.broadcast_to(b0, (4, 3)))


def test_operator_overloads(rng):
    x0 = rng.uniform(0.5, 1.5, size=(3,))

    def f(v):
        return ad.sum((2.0 * v - 1.0) / (v + 3.0) * v ** 2.0 - (-v))

    def f_np(x):
        return float(np.sum((2.0 * x - 1.0) / (x + 3.0) * x ** 2.0 + x))

    _, (g,) = ad.value_and_grad(f, x0)
    assert rel_err(g, fd_grad(f_np, x0)) <= 1e-5


def test_non_var_output_gives_zero_grads():
    val, (g,) = ad.value_and_grad(lambda v: 3.0, np.ones(4))
    assert val == 3.0 and np.all(g == 0)
