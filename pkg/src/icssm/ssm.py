"""Interval-censored selective SSM machinery: interval-aware input
vectors, time-dependent discretization, the selective projection, the
state scan, and the gated residual block.

The state generator is a per-channel diagonal constrained strictly
negative (through -softplus), so discretization is an elementwise
exponential and states contract over long censored gaps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


# -- interval-aware vectors -------------------------------------------

@dataclass
class IntervalEmbedParams:
    """Shared per-segment embedders: a gap embedder applied to both the
    backward and forward gap, and an engagement embedder applied to both
    the observed and predicted engagement."""
    w_t: Parameter        # (d_v,)
    b_t: Parameter        # (d_v,)
    w_e: Parameter        # (d_v, 4)
    b_e: Parameter        # (d_v,)
    d_v: int
    s_ref: float = 3600.0

    @staticmethod
    def create(d_v: int, s_ref: float = 3600.0,
               rng: np.random.Generator | None = None,
               prefix: str = "interval") -> "IntervalEmbedParams":
        rng = rng or np.random.default_rng(0)
        return IntervalEmbedParams(
            w_t=Parameter(rng.normal(0, 0.5, size=d_v), f"{prefix}.w_t"),
            b_t=Parameter(np.zeros(d_v), f"{prefix}.b_t"),
            w_e=Parameter(rng.normal(0, 0.5, size=(d_v, 4)), f"{prefix}.w_e"),
            b_e=Parameter(np.zeros(d_v), f"{prefix}.b_e"),
            d_v=d_v, s_ref=s_ref,
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_t, self.b_t, self.w_e, self.b_e]


def _embed_gaps(gaps: np.ndarray, p: IntervalEmbedParams) -> Tensor:
    """(L,) gaps -> (L, d_v) via tanh(w_t * log1p(gap/s_ref) + b_t)."""
    feat = np.log1p(np.asarray(gaps, dtype=np.float64) / p.s_ref)
    prod = ad.mul(Tensor(feat[:, None]), p.w_t.reshape((1, -1)))
    return ad.tanh(ad.add(prod, p.b_t.reshape((1, -1))))


def _embed_engagement(log_e, p: IntervalEmbedParams) -> Tensor:
    """(L, 4) log1p-engagement -> (L, d_v)."""
    log_e = ad.as_tensor(log_e)
    w_t = _transpose2d(p.w_e)
    return ad.tanh(ad.add(ad.matmul(log_e, w_t), p.b_e.reshape((1, -1))))


def _transpose2d(w) -> Tensor:
    w = ad.as_tensor(w)

    def backward(g):
        if w.requires_grad:
            w._accum(g.T)

    return ad._make(w.data.T, (w,), backward, "transpose")


def build_interval_matrix(back_gaps, engagements, fwd_gaps, next_engagements,
                          params: IntervalEmbedParams) -> Tensor:
    """Stack the four embedded segments into (L, 4*d_v) rows.

    `engagements` and `next_engagements` are raw counts; the log1p
    transform is applied here.  `next_engagements` may be a Tensor when
    the predicted vector must stay on the gradient path.
    """
    back_gaps = np.asarray(back_gaps, dtype=np.float64)
    fwd_gaps = np.asarray(fwd_gaps, dtype=np.float64)
    if np.any(back_gaps < 0) or np.any(fwd_gaps < 0):
        raise ValueError("interval gaps must be nonnegative")
    if isinstance(engagements, Tensor):
        log_e = ad.log1p(engagements)
    else:
        e = np.asarray(engagements, dtype=np.float64)
        if np.any(e < 0):
            raise ValueError("engagement counts must be nonnegative")
        log_e = Tensor(np.log1p(e))
    if isinstance(next_engagements, Tensor):
        log_next = ad.log1p(next_engagements)
    else:
        nxt = np.asarray(next_engagements, dtype=np.float64)
        if np.any(nxt < 0):
            raise ValueError("engagement counts must be nonnegative")
        log_next = Tensor(np.log1p(nxt))
    return ad.concat([
        _embed_gaps(back_gaps, params),
        _embed_engagement(log_e, params),
        _embed_gaps(fwd_gaps, params),
        _embed_engagement(log_next, params),
    ], axis=1)


def build_interval_vector(mode: str, t_prev: float, t_cur: float, e_cur,
                          t_next: float, e_hat_next,
                          embed_params: IntervalEmbedParams) -> Tensor:
    """One interval-aware row.

    history mode encodes (t_cur - t_prev, e_cur, t_next - t_cur, e_hat);
    prediction mode is the same arithmetic with t_cur the last observed
    time, t_prev that observation's reference, and fixed-length forward
    steps supplied by the caller.
    """
    if mode not in ("history", "prediction"):
        raise ValueError(f"unknown mode '{mode}'")
    if not (t_prev <= t_cur <= t_next):
        raise ValueError("interval times must be ordered t_prev <= t_cur <= t_next")
    row = build_interval_matrix(
        [t_cur - t_prev], np.asarray(e_cur, dtype=np.float64).reshape(1, 4),
        [t_next - t_cur],
        e_hat_next.reshape((1, 4)) if isinstance(e_hat_next, Tensor)
        else np.asarray(e_hat_next, dtype=np.float64).reshape(1, 4),
        embed_params)
    return row.reshape(4 * embed_params.d_v)


# -- discretization ----------------------------------------------------

def discretize(a_tilde: np.ndarray, dt: float) -> np.ndarray:
    """Elementwise transition factors exp(dt * a); identity at dt = 0."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return np.exp(dt * np.asarray(a_tilde, dtype=np.float64))


# -- selective projection ---------------------------------------------

def selective_projection(v, te, w, b, d_model: int, n_state: int):
    """Single affine map over [v; te] split into (X, Delta, B, C).

    Slice widths are (d_model, 1, n_state, n_state); the Delta slice is
    passed through softplus so every entry is positive.
    """
    v, te = ad.as_tensor(v), ad.as_tensor(te)
    if v.data.shape[0] != te.data.shape[0]:
        raise ValueError("interval vectors and temporal embeddings differ in length")
    joint = ad.concat([v, te], axis=1)
    p = ad.add(ad.matmul(joint, _transpose2d(w)), ad.as_tensor(b).reshape((1, -1)))
    x = p[:, :d_model]
    delta = ad.softplus(p[:, d_model])
    b_sel = p[:, d_model + 1:d_model + 1 + n_state]
    c_sel = p[:, d_model + 1 + n_state:]
    return x, delta, b_sel, c_sel


# -- the scan ----------------------------------------------------------

def scan_states(a_tilde: Tensor, b_sel: Tensor, x: Tensor,
                dt_eff: Tensor) -> Tensor:
    """Hidden states of the diagonal recurrence
    h_t = exp(dt_t * A) * h_{t-1} + outer(x_t, b_t), h_0 = 0.

    Returns (L, D, N).  Evaluated in closed form as a masked L x L
    contraction (numerically safe: A < 0 and dt >= 0 keep every factor in
    (0, 1]); the naive sequential loop serves as its oracle.
    """
    a_tilde, b_sel = ad.as_tensor(a_tilde), ad.as_tensor(b_sel)
    x, dt_eff = ad.as_tensor(x), ad.as_tensor(dt_eff)
    L, D = x.data.shape
    N = b_sel.data.shape[1]
    if L == 0:
        return Tensor(np.zeros((0, D, N)))
    if np.any(dt_eff.data < 0):
        raise ValueError("effective step sizes must be nonnegative")

    contrib = dt_eff.data[:, None, None] * a_tilde.data[None]        # (L,D,N)
    c = np.cumsum(contrib, axis=0)
    expo = c[:, None] - c[None, :]                                   # (L,L,D,N)
    mask = np.tril(np.ones((L, L), dtype=bool))
    expo = np.where(mask[:, :, None, None], expo, -np.inf)
    w = np.exp(expo)
    u = x.data[:, :, None] * b_sel.data[:, None, :]                  # (L,D,N)
    h = np.einsum("tsdn,sdn->tdn", w, u)

    def backward(g):
        du = np.einsum("tsdn,tdn->sdn", w, g)
        if x.requires_grad:
            x._accum(np.einsum("sdn,sn->sd", du, b_sel.data))
        if b_sel.requires_grad:
            b_sel._accum(np.einsum("sdn,sd->sn", du, x.data))
        if a_tilde.requires_grad or dt_eff.requires_grad:
            dc = g * h - u * du
            dcontrib = np.cumsum(dc[::-1], axis=0)[::-1]
            if dt_eff.requires_grad:
                dt_eff._accum(np.einsum("tdn,dn->t", dcontrib, a_tilde.data))
            if a_tilde.requires_grad:
                a_tilde._accum(np.einsum("tdn,t->dn", dcontrib, dt_eff.data))

    return ad._make(h, (a_tilde, b_sel, x, dt_eff), backward, "scan_states")


def scan_states_sequential(a_tilde: np.ndarray, b_sel: np.ndarray,
                           x: np.ndarray, dt_eff: np.ndarray) -> np.ndarray:
    """Naive sequential recurrence; the independent oracle for
    `scan_states` and the memory-safe path for very long sequences."""
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    L, D = np.asarray(x).shape
    N = np.asarray(b_sel).shape[1]
    h = np.zeros((D, N))
    out = np.empty((L, D, N))
    for t in range(L):
        factor = np.exp(dt_eff[t] * a_tilde)
        h = factor * h + x[t][:, None] * b_sel[t][None, :]
        out[t] = h
    return out


def ssm_scan(a_tilde, b_sel, c_sel, x, delta, gaps, s_ref: float = 1.0):
    """Full selective scan: y_t = sum_n C_t[n] * h_t[:, n].

    The effective step couples the learned selectivity with the real
    censored gap: dt_eff = delta * (gap / s_ref).  Returns (Y, H).
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    if np.any(gaps < 0):
        raise ValueError("gaps must be nonnegative")
    delta = ad.as_tensor(delta)
    dt_eff = ad.mul(delta, Tensor(gaps / s_ref))
    h = scan_states(a_tilde, b_sel, x, dt_eff)
    c_sel = ad.as_tensor(c_sel)
    L, N = c_sel.data.shape
    y = ad.tsum(ad.mul(h, c_sel.reshape((L, 1, N))), axis=2)
    return y, h


# -- block -------------------------------------------------------------

@dataclass
class SsmBlockParams:
    a_raw: Parameter       # (D, N); effective generator is -softplus(a_raw)
    proj_w: Parameter      # (D + 1 + 2N, D + d_emb)
    proj_b: Parameter      # (D + 1 + 2N,)
    conv_kernel: Parameter  # (D, W)
    out_w: Parameter       # (D, D)
    out_b: Parameter       # (D,)
    norm_scale: Parameter  # (D,)
    d_model: int
    n_state: int
    conv_width: int

    @staticmethod
    def create(d_model: int, n_state: int, d_emb: int, conv_width: int = 4,
               rng: np.random.Generator | None = None,
               prefix: str = "block") -> "SsmBlockParams":
        rng = rng or np.random.default_rng(0)
        in_dim = d_model + d_emb
        out_dim = d_model + 1 + 2 * n_state
        return SsmBlockParams(
            a_raw=Parameter(rng.uniform(-0.5, 1.0, size=(d_model, n_state)),
                            f"{prefix}.a_raw"),
            proj_w=Parameter(rng.normal(0, 1.0 / np.sqrt(in_dim),
                                        size=(out_dim, in_dim)),
                             f"{prefix}.proj_w"),
            proj_b=Parameter(np.zeros(out_dim), f"{prefix}.proj_b"),
            conv_kernel=Parameter(rng.normal(0, 0.3, size=(d_model, conv_width)),
                                  f"{prefix}.conv_kernel"),
            out_w=Parameter(rng.normal(0, 1.0 / np.sqrt(d_model),
                                       size=(d_model, d_model)),
                            f"{prefix}.out_w"),
            out_b=Parameter(np.zeros(d_model), f"{prefix}.out_b"),
            norm_scale=Parameter(np.ones(d_model), f"{prefix}.norm_scale"),
            d_model=d_model, n_state=n_state, conv_width=conv_width,
        )

    def a_tilde(self) -> Tensor:
        return ad.mul(ad.softplus(self.a_raw), -1.0)

    def parameters(self) -> list[Parameter]:
        return [self.a_raw, self.proj_w, self.proj_b, self.conv_kernel,
                self.out_w, self.out_b, self.norm_scale]


_NORM_EPS = 1e-8


def rms_norm(u: Tensor, scale: Parameter) -> Tensor:
    """Pre-norm RMS scaling along the feature axis (row-wise, causal)."""
    ms = ad.tmean(ad.square(u), axis=1)
    inv = ad.rsqrt(ad.add(ms, _NORM_EPS))
    return ad.mul(ad.mul(u, inv.reshape((-1, 1))), scale.reshape((1, -1)))


def icmamba_block(u: Tensor, te: Tensor, gaps, params: SsmBlockParams,
                  s_ref: float = 3600.0):
    """One gated interval-aware block over the (L, D) stream.

    norm -> selective projection over [norm(u); te] -> scan ->
    Y * silu(conv(X)) -> output projection -> residual.
    Returns (stream_out, hidden_states); the hidden states (L, D, N)
    feed the temporal-coherence loss.
    """
    z = rms_norm(u, params.norm_scale)
    x, delta, b_sel, c_sel = selective_projection(
        z, te, params.proj_w, params.proj_b, params.d_model, params.n_state)
    y, h = ssm_scan(params.a_tilde(), b_sel, c_sel, x, delta, gaps, s_ref)
    gate = ad.silu(ad.causal_conv1d(x, params.conv_kernel))
    gated = ad.mul(y, gate)
    out = ad.add(ad.matmul(gated, _transpose2d(params.out_w)),
                 params.out_b.reshape((1, -1)))
    return ad.add(u, out), h
