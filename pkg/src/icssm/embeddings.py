"""Time-aware positional embeddings.

Two encodings are fused: a relative sinusoid with a learnable time scale
(`rte`) and an absolute multi-frequency sinusoid (`ate`).  Their learned
projection (`pe`) is modulated by observed engagement volume (`epe`).
Relative times are in seconds; absolute times are rescaled to days so the
sinusoid frequencies discriminate at dataset time scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

SECONDS_PER_DAY = 86400.0


@dataclass
class TimeEmbeddingParams:
    """Learnable pieces of the time embedding.

    `sigma_raw` stores the RTE scale before a softplus, keeping the
    effective scale strictly positive.
    """
    sigma_raw: Parameter
    w_p: Parameter
    d_emb: int
    ate_base: float = 10000.0

    @staticmethod
    def create(d_emb: int, sigma_init: float = 10000.0, ate_base: float = 10000.0,
               rng: np.random.Generator | None = None,
               prefix: str = "time_embed") -> "TimeEmbeddingParams":
        if d_emb % 2 != 0:
            raise ValueError("d_emb must be even")
        if ate_base <= 1:
            raise ValueError("ate_base must exceed 1")
        rng = rng or np.random.default_rng(0)
        # softplus(raw) == sigma_init; for large values softplus is identity
        raw = sigma_init if sigma_init > 30 else np.log(np.expm1(sigma_init))
        w = rng.normal(0.0, 1.0 / np.sqrt(1 + d_emb), size=(d_emb, 1 + d_emb))
        return TimeEmbeddingParams(
            sigma_raw=Parameter(raw, f"{prefix}.sigma_raw"),
            w_p=Parameter(w, f"{prefix}.w_p"),
            d_emb=d_emb,
            ate_base=ate_base,
        )

    def sigma(self) -> Tensor:
        return ad.softplus(self.sigma_raw)

    def parameters(self) -> list[Parameter]:
        return [self.sigma_raw, self.w_p]


def rte(t, t_ref, sigma) -> Tensor:
    """sin((t - t_ref) / sigma); depends only on the time difference."""
    delta = np.asarray(t, dtype=np.float64) - np.asarray(t_ref, dtype=np.float64)
    sigma = ad.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    return ad.sin(ad.div(Tensor(delta), sigma))


def ate(t, d_emb: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved [sin, cos] pairs over d_emb/2 geometric frequencies.

    `t` is in days; accepts a scalar or a 1-D array of times.
    """
    if d_emb % 2 != 0:
        raise ValueError("d_emb must be even")
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    i = np.arange(d_emb // 2)
    freq = 1.0 / base ** (2 * i / d_emb)
    angles = t[:, None] * freq[None, :]
    out = np.empty((t.size, d_emb))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out[0] if scalar else out


def pe(t, t_ref, params: TimeEmbeddingParams) -> Tensor:
    """Learned projection of the fused [rte; ate] feature vector.

    Vectorized: scalar inputs give a (d_emb,) vector, arrays give
    (L, d_emb) rows.
    """
    r = rte(t, t_ref, params.sigma())
    a = ate(np.asarray(t, dtype=np.float64) / SECONDS_PER_DAY,
            params.d_emb, params.ate_base)
    if r.data.ndim == 0:
        feats = ad.concat([r.reshape(1), Tensor(a)], axis=0)
        return ad.matmul(params.w_p, feats)
    feats = ad.concat([r.reshape((-1, 1)), Tensor(a)], axis=1)
    return ad.matmul(feats, _transpose(params.w_p))


def _transpose(w: Parameter) -> Tensor:
    def backward(g):
        if w.requires_grad:
            w._accum(g.T)
    return ad._make(w.data.T, (w,), backward, "transpose")


def epe(t, t_ref, e, params: TimeEmbeddingParams) -> Tensor:
    """Engagement-modulated embedding: pe * (1 + log1p(total engagement)).

    The modulation scalar is the summed engagement across channels,
    broadcast over the embedding width.
    """
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("engagement counts must be nonnegative")
    total = e.sum(axis=-1) if e.ndim > 0 else e
    base = pe(t, t_ref, params)
    mod = 1.0 + np.log1p(total)
    if base.data.ndim == 2:
        mod = np.atleast_1d(mod)[:, None]
    return ad.mul(base, Tensor(np.broadcast_to(mod, base.data.shape).copy()
                               if base.data.ndim == 2 else mod))


@dataclass
class TimeEmbeddingSequence:
    """Per-post embedding rows: one engagement-modulated row per in-window
    observation plus a final unmodulated row at the prediction time."""
    rows: Tensor          # (m_k + 1, d_emb)
    times: np.ndarray     # the t_j values plus tau_k


def build_time_sequence(post, tau_k: float, tau_obs: float,
                        params: TimeEmbeddingParams) -> TimeEmbeddingSequence:
    """Rows for observations with t_j <= t0 + tau_obs, referenced to tau_k."""
    t0 = post.t0
    if tau_k < t0 + tau_obs:
        raise ValueError("tau_k must be at or after the end of the observation window")
    times = np.array([obs.t for obs in post.history], dtype=np.float64)
    if times.size and np.any(np.diff(times) <= 0):
        raise ValueError("observation history must be strictly increasing")
    mask = times <= t0 + tau_obs
    in_times = times[mask]
    engagements = np.array([post.history[i].e for i in range(len(post.history))
                            if mask[i]], dtype=np.float64).reshape(-1, 4)
    parts = []
    if in_times.size:
        parts.append(epe(in_times, np.full_like(in_times, tau_k), engagements, params))
    parts.append(pe(tau_k, tau_k, params).reshape((1, -1)))
    rows = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return TimeEmbeddingSequence(rows=rows, times=np.append(in_times, tau_k))
