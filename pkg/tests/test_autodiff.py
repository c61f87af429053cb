"""Gradient correctness of every differentiable op against central
finite differences, plus tape mechanics and finite-value guards."""
import numpy as np
import pytest

import icssm.autodiff as ad
from icssm.autodiff import NumericError, Parameter, Tensor, grad_check

TOL = 1e-4  # acceptance bound for max relative error vs central differences


def _p(rng, shape, name="p", scale=1.0):
    return Parameter(rng.normal(0, scale, size=shape), name)


# one entry per op: (builder returning a scalar computation, params)
def _unary_cases(rng):
    x = _p(rng, (3, 4), "x", 0.5)
    pos = Parameter(np.abs(rng.normal(1.5, 0.3, size=(3, 4))) + 0.5, "pos")
    cases = {
        "exp": (lambda: ad.exp(x).sum(), [x]),
        "log": (lambda: ad.log(pos).sum(), [pos]),
        "log1p": (lambda: ad.log1p(pos).sum(), [pos]),
        "sin": (lambda: ad.sin(x).sum(), [x]),
        "cos": (lambda: ad.cos(x).sum(), [x]),
        "tanh": (lambda: ad.tanh(x).sum(), [x]),
        "sigmoid": (lambda: ad.sigmoid(x).sum(), [x]),
        "silu": (lambda: ad.silu(x).sum(), [x]),
        "softplus": (lambda: ad.softplus(x).sum(), [x]),
        "rsqrt": (lambda: ad.rsqrt(pos).sum(), [pos]),
        "square": (lambda: ad.square(x).sum(), [x]),
        "logsumexp": (lambda: ad.logsumexp(x, axis=1).sum(), [x]),
        "mean": (lambda: x.mean(), [x]),
        "reshape": (lambda: ad.mul(x.reshape((4, 3)), 2.0).sum(), [x]),
        "getitem": (lambda: x[1:, 2].sum(), [x]),
    }
    return cases


@pytest.mark.parametrize("name", list(_unary_cases(np.random.default_rng(1))))
def test_unary_op_gradients(name, rng):
    fn, params = _unary_cases(rng)[name]
    assert grad_check(fn, params) < TOL


def test_binary_op_gradients(rng):
    a = _p(rng, (3, 4), "a")
    b = _p(rng, (3, 4), "b")
    c = Parameter(np.abs(rng.normal(2, 0.3, size=(3, 4))) + 0.5, "c")
    w = _p(rng, (4, 5), "w")
    assert grad_check(lambda: ad.add(a, b).sum(), [a, b]) < TOL
    assert grad_check(lambda: ad.mul(a, b).sum(), [a, b]) < TOL
    assert grad_check(lambda: ad.div(a, c).sum(), [a, c]) < TOL
    assert grad_check(lambda: ad.matmul(a, w).sum(), [a, w]) < TOL


def test_matmul_vector_gradients(rng):
    v = _p(rng, (4,), "v")
    w = _p(rng, (4, 3), "w")
    m = _p(rng, (3, 4), "m")
    assert grad_check(lambda: ad.matmul(v, w).sum(), [v, w]) < TOL
    assert grad_check(lambda: ad.matmul(m, v).sum(), [m, v]) < TOL


def test_broadcasting_gradients(rng):
    row = _p(rng, (1, 4), "row")
    col = _p(rng, (3, 1), "col")
    assert grad_check(lambda: ad.mul(row, col).sum(), [row, col]) < TOL
    assert grad_check(lambda: ad.add(row, col).sum(), [row, col]) < TOL


def test_structural_op_gradients(rng):
    a = _p(rng, (2, 3), "a")
    b = _p(rng, (2, 3), "b")
    table = _p(rng, (7, 3), "table")
    ids = np.array([0, 3, 3, 6])
    assert grad_check(lambda: ad.concat([a, b], axis=1).sum(), [a, b]) < TOL
    assert grad_check(lambda: ad.stack([a, b], axis=0).sum(), [a, b]) < TOL
    assert grad_check(
        lambda: ad.square(ad.gather_rows(table, ids)).sum(), [table]) < TOL


def test_causal_conv1d_gradient(rng):
    x = _p(rng, (6, 3), "x")
    k = _p(rng, (3, 4), "k", 0.5)
    assert grad_check(lambda: ad.square(ad.causal_conv1d(x, k)).sum(),
                      [x, k]) < TOL


def test_causal_conv1d_is_causal(rng):
    # output at t must not change when inputs strictly after t change
    x = rng.normal(size=(6, 2))
    k = rng.normal(size=(2, 3))
    base = ad.causal_conv1d(Tensor(x), Tensor(k)).data
    x2 = x.copy()
    x2[4:] += 10.0
    pert = ad.causal_conv1d(Tensor(x2), Tensor(k)).data
    np.testing.assert_allclose(base[:4], pert[:4], rtol=0, atol=0)
    assert not np.allclose(base[4:], pert[4:])


def test_reused_node_accumulates_gradient():
    x = Parameter(np.array(3.0), "x")
    y = ad.add(ad.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
    y.backward()
    assert np.isclose(x.grad, 7.0)


def test_backward_requires_scalar():
    x = Parameter(np.ones(3), "x")
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        ad.exp(Tensor(np.array([1e6])))
    with pytest.raises(NumericError):
        ad.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_log_domain_errors():
    with pytest.raises(ValueError):
        ad.log(Tensor(np.array([0.0])))
    with pytest.raises(ValueError):
        ad.log1p(Tensor(np.array([-1.0])))


def test_grad_check_rejects_bad_eps():
    x = Parameter(np.array(1.0), "x")
    with pytest.raises(ValueError):
        grad_check(lambda: ad.square(x), [x], eps=1e-2)


def test_grad_check_detects_wrong_gradient():
    # a deliberately wrong backward must be flagged
    x = Parameter(np.array(1.3), "x")

    def broken():
        def backward(g):
            x._accum(g * 999.0)
        return ad._make(x.data * 2.0, (x,), backward, "broken")

    assert grad_check(broken, [x]) > 1.0
