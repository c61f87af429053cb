"""Matrix-exponential oracles and the optimizer."""
import numpy as np
import pytest

from icssm.autodiff import NumericError, Parameter
from icssm.numerics import (OptimizerConfig, OptimizerState, clip_global_norm,
                            effective_lr, matexp, matexp_dense, matexp_diag,
                            optimizer_step)


def test_diag_identity_at_zero_dt():
    a = -np.abs(np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(matexp_diag(a, 0.0), np.ones_like(a))


def test_diag_semigroup_property(rng):
    # exp((s+t)A) == exp(sA) * exp(tA), elementwise for diagonal A
    for _ in range(100):
        a = -np.abs(rng.normal(size=6))
        s, t = rng.uniform(0, 2, size=2)
        lhs = matexp_diag(a, s + t)
        rhs = matexp_diag(a, s) * matexp_diag(a, t)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_diag_vs_dense_agreement(rng):
    for _ in range(100):
        a = -np.abs(rng.normal(size=4))
        dt = rng.uniform(0, 3)
        dense = matexp_dense(np.diag(a), dt)
        diag = matexp_diag(a, dt)
        assert np.max(np.abs(np.diag(dense) - diag)) < 1e-10
        off = dense - np.diag(np.diag(dense))
        assert np.max(np.abs(off)) < 1e-12


def test_dense_nilpotent_exact():
    # exp(dt*N) for strictly upper-triangular N terminates: I + dt*N
    n = np.array([[0.0, 2.0], [0.0, 0.0]])
    expected = np.eye(2) + 0.7 * n
    np.testing.assert_allclose(matexp_dense(n, 0.7), expected, atol=1e-14)


def test_dense_rotation_oracle():
    # exp(t*[[0,-1],[1,0]]) is a rotation by t
    g = np.array([[0.0, -1.0], [1.0, 0.0]])
    t = 0.9
    expected = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    np.testing.assert_allclose(matexp_dense(g, t), expected, atol=1e-12)


def test_dense_matches_scipy_oracle(rng):
    scipy_linalg = pytest.importorskip("scipy.linalg")
    for _ in range(20):
        n = int(rng.integers(1, 6))
        a = rng.normal(size=(n, n))
        dt = rng.uniform(0, 2)
        np.testing.assert_allclose(matexp_dense(a, dt),
                                   scipy_linalg.expm(dt * a),
                                   rtol=1e-10, atol=1e-10)


def test_matexp_dispatch():
    a = -np.ones(3)
    np.testing.assert_allclose(matexp(a, 1.0), np.exp(-1.0) * np.ones(3))
    m = np.zeros((2, 2))
    np.testing.assert_allclose(matexp(m, 5.0), np.eye(2))


def test_matexp_rejects_negative_dt():
    with pytest.raises(ValueError):
        matexp_diag(-np.ones(2), -0.1)
    with pytest.raises(ValueError):
        matexp_dense(np.zeros((2, 2)), -1.0)


# -- optimizer ----------------------------------------------------------

def test_adam_first_step_matches_hand_computation():
    # after one step from zero moments, update is lr * g/|g| elementwise
    # (bias correction cancels): m_hat = g, v_hat = g^2
    p = Parameter(np.array([1.0, -2.0]), "w")
    cfg = OptimizerConfig(lr=0.1, warmup_steps=0, clip_norm=1e9, eps=0.0)
    state = OptimizerState()
    g = np.array([0.3, -0.4])
    optimizer_step([p], {"w": g.copy()}, state, cfg)
    expected = np.array([1.0, -2.0]) - 0.1 * np.sign(g)
    np.testing.assert_allclose(p.data, expected, atol=1e-12)


def test_adam_against_reference_loop(rng):
    # 20 steps vs an independent straight-line Adam implementation
    p = Parameter(rng.normal(size=4), "w")
    ref = p.data.copy()
    cfg = OptimizerConfig(lr=0.01, warmup_steps=0, clip_norm=1e9)
    state = OptimizerState()
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 21):
        g = rng.normal(size=4)
        optimizer_step([p], {"w": g.copy()}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g ** 2
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-12)


def test_global_norm_clipping():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_global_norm(grads, 1.0)
    norm = np.sqrt(sum(float(g @ g) for g in clipped.values()))
    assert np.isclose(norm, 1.0)
    # under the threshold: untouched
    small = clip_global_norm({"a": np.array([0.1])}, 1.0)
    np.testing.assert_array_equal(small["a"], np.array([0.1]))


def test_linear_warmup():
    assert effective_lr(1.0, 0, 10) == 0.0
    assert np.isclose(effective_lr(1.0, 5, 10), 0.5)
    assert effective_lr(1.0, 10, 10) == 1.0
    assert effective_lr(1.0, 100, 10) == 1.0
    assert effective_lr(1.0, 3, 0) == 1.0


def test_decoupled_weight_decay_shrinks_parameters():
    p = Parameter(np.array([10.0]), "w")
    cfg = OptimizerConfig(lr=0.1, warmup_steps=0, weight_decay=0.5,
                          clip_norm=1e9)
    optimizer_step([p], {"w": np.array([0.0])}, OptimizerState(), cfg)
    # zero gradient: only the decay term acts
    np.testing.assert_allclose(p.data, np.array([10.0 - 0.1 * 0.5 * 10.0]))


def test_non_finite_gradient_names_parameter():
    p = Parameter(np.array([1.0]), "layer.weight")
    with pytest.raises(NumericError, match="layer.weight"):
        optimizer_step([p], {"layer.weight": np.array([np.nan])},
                       OptimizerState(), OptimizerConfig())
