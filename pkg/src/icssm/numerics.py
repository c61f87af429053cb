"""Matrix-exponential numerics and the training optimizer.

The model itself only ever exponentiates per-channel diagonal generators;
the dense path (scaling-and-squaring with a fixed-order Pade approximant)
exists as an independent verification oracle for the diagonal shortcut.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

from .autodiff import NumericError, Parameter

_PADE_ORDER = 6


def _pade_coeffs(m: int) -> np.ndarray:
    return np.array([
        factorial(2 * m - k) * comb(m, k) / factorial(2 * m)
        for k in range(m + 1)
    ])


_PADE_C = _pade_coeffs(_PADE_ORDER)


def matexp_diag(a: np.ndarray, dt: float) -> np.ndarray:
    """exp(dt * a) elementwise for a diagonal generator stored as a vector."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return np.exp(dt * np.asarray(a, dtype=np.float64))


def matexp_dense(a: np.ndarray, dt: float) -> np.ndarray:
    """exp(dt * A) for a dense square matrix via scaling-and-squaring."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("dense matexp requires a square matrix")
    m = dt * a
    norm = np.linalg.norm(m, 1)
    s = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    m = m / (2 ** s)
    # [6/6] Pade approximant of exp(m)
    powers = [np.eye(m.shape[0])]
    for _ in range(_PADE_ORDER):
        powers.append(powers[-1] @ m)
    num = sum(c * p for c, p in zip(_PADE_C, powers))
    den = sum(c * p * (-1) ** k for k, (c, p) in enumerate(zip(_PADE_C, powers)))
    out = np.linalg.solve(den, num)
    for _ in range(s):
        out = out @ out
    return out


def matexp(a: np.ndarray, dt: float) -> np.ndarray:
    """Dispatch: 1-D input takes the diagonal path, 2-D the dense path."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return matexp_diag(a, dt)
    return matexp_dense(a, dt)


# -- optimizer ---------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 500
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], clip: float) -> dict[str, np.ndarray]:
    """Scale all gradients so their joint L2 norm is at most `clip`."""
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if total > clip and total > 0:
        scale = clip / total
        return {k: g * scale for k, g in grads.items()}
    return dict(grads)


def effective_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup from 0 over `warmup_steps`, then constant."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step / warmup_steps)
    return base_lr


def optimizer_step(params: list[Parameter], grads: dict[str, np.ndarray],
                   state: OptimizerState, config: OptimizerConfig) -> None:
    """One Adam step with global-norm clipping and decoupled weight decay.

    Mutates parameter values and optimizer state in place; deterministic
    given identical inputs.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    grads = clip_global_norm(grads, config.clip_norm)
    state.step += 1
    t = state.step
    lr = effective_lr(config.lr, t, config.warmup_steps)
    b1, b2 = config.beta1, config.beta2
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        state.m[p.name] = m
        state.v[p.name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + config.eps)
        if config.weight_decay > 0:
            update = update + config.weight_decay * p.data
        p.data = p.data - lr * update
