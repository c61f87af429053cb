"""The full engagement model: embedding fusion, stacked gated SSM blocks,
forecasting and classification heads, and the two-tier post/opinion
composition.

Two equivalent execution paths exist: a taped (autodiff) whole-sequence
forward used for training, and a per-row numpy stepper used for
autoregressive rollout.  Both implement identical row arithmetic; their
agreement is under test.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import N_CHANNELS, PostRecord
from .embeddings import SECONDS_PER_DAY, TimeEmbeddingParams, ate, epe
from .encoder import AblationFlags, EncoderParams, encode_sequence, tokenize_post
from .ssm import (IntervalEmbedParams, SsmBlockParams, build_interval_matrix,
                  icmamba_block)

# Hyperparameter ranges used when strict mode is requested.
_STRICT_RANGES = {
    "n_state": (256, 1024),
    "d_model": (64, 128),
    "n_blocks": (2, 8),
    "d_emb": (128, 512),
    "l_max": (1024, 8192),
}


@dataclass
class ModelConfig:
    d_emb: int = 16
    d_v: int = 4
    d_model: int = 16
    n_state: int = 4
    n_blocks: int = 2
    conv_width: int = 4
    l_max: int = 1024
    head_hidden: int = 32
    n_opinions: int = 3
    opinion_labels: list[str] = field(default_factory=list)
    tau_step: float = 300.0
    s_ref: float = 3600.0
    sigma_init: float = 10000.0
    teacher_forcing_start: float = 1.0
    teacher_forcing_end: float = 0.5
    ablate_text: bool = False
    ablate_user: bool = False
    ablate_time: bool = False
    strict: bool = False

    def __post_init__(self):
        if self.d_emb % 2:
            raise ValueError("d_emb must be even")
        if self.strict:
            for key, (lo, hi) in _STRICT_RANGES.items():
                value = getattr(self, key)
                if not lo <= value <= hi:
                    raise ValueError(
                        f"strict mode: {key}={value} outside [{lo}, {hi}]")

    def flags(self) -> AblationFlags:
        return AblationFlags(no_text=self.ablate_text, no_user=self.ablate_user,
                             no_time=self.ablate_time)

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        return ModelConfig(**obj)


class ICMambaModel:
    """Parameter container plus forward/rollout entry points."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.time_embed = TimeEmbeddingParams.create(
            c.d_emb, sigma_init=c.sigma_init, rng=rng)
        self.interval = IntervalEmbedParams.create(c.d_v, s_ref=c.s_ref, rng=rng)
        self.encoder = EncoderParams.create(c.d_emb, rng=rng)
        fuse_in = 4 * c.d_v + 2 * c.d_emb
        self.fuse_w = Parameter(
            rng.normal(0, 1.0 / np.sqrt(fuse_in), size=(c.d_model, fuse_in)),
            "fuse.w")
        self.fuse_b = Parameter(np.zeros(c.d_model), "fuse.b")
        self.time_const = Parameter(rng.normal(0, 0.1, size=c.d_emb),
                                    "ablation.time_const")
        self.blocks = [
            SsmBlockParams.create(c.d_model, c.n_state, c.d_emb, c.conv_width,
                                  rng=rng, prefix=f"block{i}")
            for i in range(c.n_blocks)
        ]
        h = c.head_hidden
        self.next_w1 = Parameter(
            rng.normal(0, 1.0 / np.sqrt(c.d_model), size=(h, c.d_model)),
            "head.next_w1")
        self.next_b1 = Parameter(np.zeros(h), "head.next_b1")
        self.next_w2 = Parameter(rng.normal(0, 1.0 / np.sqrt(h),
                                            size=(N_CHANNELS, h)), "head.next_w2")
        self.next_b2 = Parameter(np.zeros(N_CHANNELS), "head.next_b2")
        self.total_w = Parameter(rng.normal(0, 1.0 / np.sqrt(c.d_model),
                                            size=(N_CHANNELS, c.d_model)),
                                 "head.total_w")
        self.total_b = Parameter(np.zeros(N_CHANNELS), "head.total_b")
        cls_in = c.d_model + c.d_emb
        self.cls_w = Parameter(rng.normal(0, 1.0 / np.sqrt(cls_in),
                                          size=(c.n_opinions, cls_in)),
                               "head.cls_w")
        self.cls_b = Parameter(np.zeros(c.n_opinions), "head.cls_b")
        # tier 2: one block over per-post summaries + a correction head
        self.tier2_block = SsmBlockParams.create(
            c.d_model, c.n_state, c.d_emb, conv_width=2, rng=rng, prefix="tier2")
        self.tier2_in_w = Parameter(
            rng.normal(0, 1.0 / np.sqrt(c.d_model), size=(c.d_model, c.d_model)),
            "tier2.in_w")
        self.tier2_corr_w = Parameter(np.zeros((N_CHANNELS, c.d_model)),
                                      "tier2.corr_w")
        self.tier2_corr_b = Parameter(np.zeros(N_CHANNELS), "tier2.corr_b")

    def parameters(self) -> list[Parameter]:
        params = (self.time_embed.parameters() + self.interval.parameters()
                  + self.encoder.parameters()
                  + [self.fuse_w, self.fuse_b, self.time_const])
        for b in self.blocks:
            params += b.parameters()
        params += [self.next_w1, self.next_b1, self.next_w2, self.next_b2,
                   self.total_w, self.total_b, self.cls_w, self.cls_b]
        params += self.tier2_block.parameters()
        params += [self.tier2_in_w, self.tier2_corr_w, self.tier2_corr_b]
        names = [p.name for p in params]
        assert len(names) == len(set(names)), "parameter names must be unique"
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- sequence assembly --------------------------------------------

    def _sequence_inputs(self, post: PostRecord, tau_obs: float,
                         next_targets: np.ndarray | None = None):
        """Row-wise inputs for the taped forward pass.

        Row 0 is a start row (zero engagement at t0); rows 1..m are the
        in-window observations.  `next_targets` supplies the 4th interval
        segment per row (teacher-forced or model-produced); defaults to
        the shifted ground truth.
        """
        obs = post.in_window(tau_obs)
        m = len(obs)
        times = np.concatenate([[post.t0], [o.t for o in obs]])
        counts = np.zeros((m + 1, N_CHANNELS))
        for j, o in enumerate(obs):
            counts[j + 1] = o.e
        back_gaps = np.diff(times, prepend=times[0])
        fwd_gaps = np.empty(m + 1)
        fwd_gaps[:-1] = np.diff(times)
        fwd_gaps[-1] = self.config.tau_step
        if next_targets is None:
            next_targets = np.zeros((m + 1, N_CHANNELS))
            next_targets[:-1] = counts[1:]
        return times, counts, back_gaps, fwd_gaps, next_targets

    def _te_rows(self, times: np.ndarray, counts: np.ndarray,
                 tau_ref: float) -> Tensor:
        if self.config.ablate_time:
            L = times.size
            return ad.mul(self.time_const.reshape((1, -1)),
                          Tensor(np.ones((L, 1))))
        return epe(times, np.full_like(times, tau_ref), counts, self.time_embed)

    def encode_post(self, post: PostRecord, tau_obs: float) -> Tensor:
        tokens = tokenize_post(post, self.config.flags(), tau_obs,
                               l_max=self.config.l_max)
        return encode_sequence(tokens, self.encoder)

    def forward_post(self, post: PostRecord, tau_obs: float,
                     next_inputs: np.ndarray | None = None):
        """Taped forward pass over the in-window history.

        Returns a dict with the final stream (L, D), per-block hidden
        states, next-engagement head outputs in log1p space (L, 4), the
        content vector, and the forward gaps (for the temporal-coherence
        loss).
        """
        c = self.config
        times, counts, back_gaps, fwd_gaps, next_targets = \
            self._sequence_inputs(post, tau_obs, next_inputs)
        L = times.size
        tau_ref = post.t0 + tau_obs
        v = build_interval_matrix(back_gaps, counts, fwd_gaps, next_targets,
                                  self.interval)
        te = self._te_rows(times, counts, tau_ref)
        se = self.encode_post(post, tau_obs)
        se_rows = ad.mul(se.reshape((1, -1)), Tensor(np.ones((L, 1))))
        joint = ad.concat([v, te, se_rows], axis=1)
        u = ad.add(ad.matmul(joint, _t(self.fuse_w)),
                   self.fuse_b.reshape((1, -1)))
        hiddens = []
        for bp in self.blocks:
            u, h = icmamba_block(u, te, back_gaps, bp, s_ref=c.s_ref)
            hiddens.append(h)
        pred_log = self._next_head(u)
        return {
            "stream": u, "hiddens": hiddens, "pred_log": pred_log,
            "content": se, "fwd_gaps": fwd_gaps, "back_gaps": back_gaps,
            "times": times, "counts": counts,
        }

    def _next_head(self, u: Tensor) -> Tensor:
        h1 = ad.silu(ad.add(ad.matmul(u, _t(self.next_w1)),
                            self.next_b1.reshape((1, -1))))
        return ad.add(ad.matmul(h1, _t(self.next_w2)),
                      self.next_b2.reshape((1, -1)))

    # cap on log1p-space predictions: keeps the inverted counts finite
    # even when a diverging model feeds its own output back in
    _PRED_LOG_CAP = 30.0

    def predictions_from_log(self, pred_log: np.ndarray) -> np.ndarray:
        """Invert the log1p head output into nonnegative counts."""
        return np.expm1(np.clip(pred_log, 0.0, self._PRED_LOG_CAP))

    # -- task heads ----------------------------------------------------

    def total_head_log(self, out: dict) -> Tensor:
        """Log1p-space prediction of the post-window remainder counts."""
        last = out["stream"][out["stream"].data.shape[0] - 1]
        return ad.add(ad.matmul(self.total_w, last), self.total_b)

    def predict_total(self, post: PostRecord, tau_obs: float) -> np.ndarray:
        """Observed cumulative inside the window plus a nonnegative
        predicted remainder."""
        out = self.forward_post(post, tau_obs)
        z = self.total_head_log(out).data
        observed = post.cumulative_at(post.t0 + tau_obs)
        return observed + self.predictions_from_log(z)

    def class_logits(self, out: dict) -> Tensor:
        pooled = out["stream"].mean(axis=0)
        feats = ad.concat([pooled, out["content"]], axis=0)
        return ad.add(ad.matmul(self.cls_w, feats), self.cls_b)

    def classify_opinion(self, post: PostRecord, tau_obs: float) -> np.ndarray:
        out = self.forward_post(post, tau_obs)
        logits = self.class_logits(out).data
        ex = np.exp(logits - logits.max())
        return ex / ex.sum()


def _t(w: Parameter) -> Tensor:
    def backward(g):
        if w.requires_grad:
            w._accum(g.T)
    return ad._make(w.data.T, (w,), backward, "transpose")


# -- numpy row stepper (inference path) --------------------------------

class _BlockState:
    __slots__ = ("h", "conv_buf")

    def __init__(self, batch: int, d_model: int, n_state: int, width: int):
        self.h = np.zeros((batch, d_model, n_state))
        self.conv_buf = np.zeros((batch, width, d_model))  # most recent last

    def copy(self) -> "_BlockState":
        out = _BlockState.__new__(_BlockState)
        out.h = self.h.copy()
        out.conv_buf = self.conv_buf.copy()
        return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _silu(x):
    return x / (1.0 + np.exp(-np.clip(x, -500, 500)))


class RolloutState:
    """Everything needed to continue an autoregressive rollout: per-block
    recurrent state plus the last-observation anchors per batch lane."""

    def __init__(self, model: ICMambaModel, batch: int):
        c = model.config
        self.model = model
        self.batch = batch
        self.blocks = [_BlockState(batch, c.d_model, c.n_state, c.conv_width)
                       for _ in range(c.n_blocks)]
        self.t_last = np.zeros(batch)        # last observed time, absolute
        self.e_last = np.zeros((batch, N_CHANNELS))
        self.e_hat_prev = np.zeros((batch, N_CHANNELS))
        self.se = np.zeros((batch, c.d_emb))
        self.active = np.ones(batch, dtype=bool)

    def copy(self) -> "RolloutState":
        out = RolloutState.__new__(RolloutState)
        out.model = self.model
        out.batch = self.batch
        out.blocks = [b.copy() for b in self.blocks]
        out.t_last = self.t_last.copy()
        out.e_last = self.e_last.copy()
        out.e_hat_prev = self.e_hat_prev.copy()
        out.se = self.se.copy()
        out.active = self.active.copy()
        return out


def _np_interval_rows(model, back_gaps, counts, fwd_gaps, next_e):
    p = model.interval
    def gap_seg(g):
        feat = np.log1p(np.asarray(g, dtype=np.float64) / p.s_ref)
        return np.tanh(feat[:, None] * p.w_t.data[None, :] + p.b_t.data[None, :])
    def eng_seg(e):
        return np.tanh(np.log1p(e) @ p.w_e.data.T + p.b_e.data[None, :])
    return np.concatenate([gap_seg(back_gaps), eng_seg(counts),
                           gap_seg(fwd_gaps), eng_seg(next_e)], axis=1)


def _np_te_rows(model, times, counts, tau_ref):
    c = model.config
    if c.ablate_time:
        return np.broadcast_to(model.time_const.data,
                               (np.asarray(times).size, c.d_emb)).copy()
    te = model.time_embed
    sigma = _softplus(np.atleast_1d(te.sigma_raw.data))[0]
    times = np.asarray(times, dtype=np.float64)
    r = np.sin((times - tau_ref) / sigma)
    a = ate(times / SECONDS_PER_DAY, c.d_emb, te.ate_base)
    feats = np.concatenate([r[:, None], np.atleast_2d(a)], axis=1)
    base = feats @ te.w_p.data.T
    mod = 1.0 + np.log1p(np.asarray(counts).sum(axis=1))
    return base * mod[:, None]


def _np_block_rows(model, state_block, bp, u, te, gaps):
    """One row per batch lane through a single block; mutates the block
    state.  u: (P, D), te: (P, d_emb), gaps: (P,)."""
    c = model.config
    D, N = c.d_model, c.n_state
    ms = np.mean(u ** 2, axis=1)
    z = u / np.sqrt(ms + 1e-8)[:, None] * bp.norm_scale.data[None, :]
    p = np.concatenate([z, te], axis=1) @ bp.proj_w.data.T + bp.proj_b.data
    x = p[:, :D]
    delta = _softplus(p[:, D])
    b_sel = p[:, D + 1:D + 1 + N]
    c_sel = p[:, D + 1 + N:]
    dt_eff = delta * gaps / c.s_ref
    a_tilde = -_softplus(bp.a_raw.data)
    factor = np.exp(dt_eff[:, None, None] * a_tilde[None])
    state_block.h = (factor * state_block.h
                     + x[:, :, None] * b_sel[:, None, :])
    y = np.einsum("pdn,pn->pd", state_block.h, c_sel)
    state_block.conv_buf = np.concatenate(
        [state_block.conv_buf[:, 1:], x[:, None, :]], axis=1)
    # kernel[:, w] weights x at lag w; buffer stores most recent last
    W = bp.conv_kernel.data.shape[1]
    g = np.einsum("pwd,dw->pd", state_block.conv_buf[:, ::-1][:, :W],
                  bp.conv_kernel.data)
    gate = _silu(g)
    out = (y * gate) @ bp.out_w.data.T + bp.out_b.data
    return u + out


def _np_row_pass(model, state: RolloutState, back_gaps, counts, fwd_gaps,
                 next_e, te_rows):
    """Push one row per lane through fusion, all blocks, and the next head."""
    v = _np_interval_rows(model, back_gaps, counts, fwd_gaps, next_e)
    joint = np.concatenate([v, te_rows, state.se], axis=1)
    u = joint @ model.fuse_w.data.T + model.fuse_b.data
    for bp, bs in zip(model.blocks, state.blocks):
        u = _np_block_rows(model, bs, bp, u, te_rows, back_gaps)
    h1 = _silu(u @ model.next_w1.data.T + model.next_b1.data)
    pred_log = h1 @ model.next_w2.data.T + model.next_b2.data
    return u, pred_log


def init_rollout(model: ICMambaModel, posts: list[PostRecord],
                 tau_obs_end: np.ndarray | float,
                 next_time: float | None = None) -> tuple[RolloutState, np.ndarray]:
    """Feed each post's in-window history through the stepper.

    `tau_obs_end` is the absolute end of the observation window (scalar
    or per post).  Returns the state plus each post's final stream row.

    `next_time` is the absolute time of the first rollout target; the
    final history row's forward gap is set to reach it, so the row's
    prediction covers exactly the first rollout interval (it defaults to
    `tau_step` when no rollout follows).
    """
    P = len(posts)
    c = model.config
    state = RolloutState(model, P)
    ends = np.broadcast_to(np.asarray(tau_obs_end, dtype=np.float64), (P,))
    lengths = np.empty(P, dtype=int)
    rows = []
    for i, post in enumerate(posts):
        tau_obs = ends[i] - post.t0
        obs = post.in_window(tau_obs)
        m = len(obs)
        times = np.concatenate([[post.t0], [o.t for o in obs]])
        counts = np.zeros((m + 1, N_CHANNELS))
        for j, o in enumerate(obs):
            counts[j + 1] = o.e
        back_gaps = np.diff(times, prepend=times[0])
        fwd_gaps = np.empty(m + 1)
        fwd_gaps[:-1] = np.diff(times)
        fwd_gaps[-1] = (next_time - times[-1] if next_time is not None
                        else c.tau_step)
        next_e = np.zeros((m + 1, N_CHANNELS))
        next_e[:-1] = counts[1:]
        tokens = tokenize_post(post, c.flags(), tau_obs, l_max=c.l_max)
        ids = np.asarray(tokens.ids)
        pooled = model.encoder.embed.data[ids].mean(axis=0)
        state.se[i] = np.tanh(pooled @ model.encoder.w.data
                              + model.encoder.b.data)
        rows.append((back_gaps, counts, fwd_gaps, next_e,
                     _np_te_rows(model, times, counts, ends[i])))
        lengths[i] = m + 1
        state.t_last[i] = times[-1]
        state.e_last[i] = counts[-1]
    l_max = int(lengths.max())
    bg = np.zeros((P, l_max))
    fg = np.zeros((P, l_max))
    cnt = np.zeros((P, l_max, N_CHANNELS))
    ne = np.zeros((P, l_max, N_CHANNELS))
    te = np.zeros((P, l_max, c.d_emb))
    for i, (b, e, f, n, t) in enumerate(rows):
        L = lengths[i]
        bg[i, :L], cnt[i, :L], fg[i, :L], ne[i, :L], te[i, :L] = b, e, f, n, t
    final_u = np.zeros((P, c.d_model))
    # march row-by-row across all lanes at once; lanes drop out as their
    # (shorter) sequences end
    for j in range(l_max):
        idx = np.nonzero(lengths > j)[0]
        sub = _gather_lanes(state, idx)
        u, pred = _np_row_pass(model, sub, bg[idx, j], cnt[idx, j],
                               fg[idx, j], ne[idx, j], te[idx, j])
        _scatter_lanes(state, idx, sub)
        ending = lengths[idx] == j + 1
        if ending.any():
            lanes = idx[ending]
            final_u[lanes] = u[ending]
            state.e_hat_prev[lanes] = model.predictions_from_log(pred[ending])
    return state, final_u


def _gather_lanes(state: RolloutState, idx: np.ndarray) -> RolloutState:
    sub = RolloutState.__new__(RolloutState)
    sub.model = state.model
    sub.batch = idx.size
    sub.blocks = []
    for b in state.blocks:
        nb = _BlockState.__new__(_BlockState)
        nb.h = b.h[idx]
        nb.conv_buf = b.conv_buf[idx]
        sub.blocks.append(nb)
    sub.t_last = state.t_last[idx]
    sub.e_last = state.e_last[idx]
    sub.e_hat_prev = state.e_hat_prev[idx]
    sub.se = state.se[idx]
    sub.active = state.active[idx]
    return sub


def _scatter_lanes(state: RolloutState, idx: np.ndarray,
                   sub: RolloutState) -> None:
    for b, nb in zip(state.blocks, sub.blocks):
        b.h[idx] = nb.h
        b.conv_buf[idx] = nb.conv_buf


def rollout_steps(model: ICMambaModel, state: RolloutState,
                  grid_times: np.ndarray,
                  stride: float | None = None) -> np.ndarray:
    """Autoregressive prediction rows at the given absolute times.

    Returns per-step engagement increments (K, P, 4); mutates the state
    so rollouts can be resumed.

    With `stride` set, the model only steps at every stride-covering
    subset of the grid and each stride's increment is spread uniformly
    over the fine steps it covers.  Observation gaps during training are
    hours apart; stepping a fine grid (minutes) directly would feed the
    predictor gap sizes far outside anything it was fitted on, so coarse
    strides keep the rollout on-distribution (and are much cheaper).
    """
    grid_times = np.asarray(grid_times, dtype=np.float64)
    if stride is not None and grid_times.size > 1:
        spacing = np.diff(grid_times).min()
        per = max(int(round(stride / spacing)), 1)
        if per > 1:
            sel = np.arange(per - 1, grid_times.size, per)
            if sel.size == 0 or sel[-1] != grid_times.size - 1:
                sel = np.append(sel, grid_times.size - 1)
            coarse = rollout_steps(model, state, grid_times[sel])
            increments = np.empty((grid_times.size, state.batch, N_CHANNELS))
            prev = 0
            for j, s in enumerate(sel):
                increments[prev:s + 1] = coarse[j] / (s + 1 - prev)
                prev = s + 1
            return increments
    c = model.config
    P = state.batch
    K = grid_times.size
    increments = np.zeros((K, P, N_CHANNELS))
    for k, tau_k in enumerate(grid_times):
        # e_hat_prev is the prediction for the interval ending at tau_k:
        # the final history row's when init_rollout was given this grid's
        # first time, afterwards the previous loop iteration's
        increments[k] = state.e_hat_prev
        # push the row anchored at tau_k so the state advances and the
        # next interval's counts are predicted; its forward gap is the
        # next grid span (repeating the last span beyond the grid keeps
        # chunked rollouts over a uniform grid exactly resumable)
        back_gaps = tau_k - state.t_last
        span_next = (grid_times[k + 1] - tau_k if k + 1 < K
                     else (grid_times[-1] - grid_times[-2] if K > 1
                           else float(np.mean(back_gaps))))
        fwd_gaps = np.full(P, span_next)
        if c.ablate_time:
            te_rows = np.broadcast_to(model.time_const.data,
                                      (P, c.d_emb)).copy()
        else:
            te = model.time_embed
            a = ate(np.full(P, tau_k) / SECONDS_PER_DAY, c.d_emb, te.ate_base)
            feats = np.concatenate([np.zeros((P, 1)), np.atleast_2d(a)], axis=1)
            te_rows = feats @ te.w_p.data.T
        # the row's own prediction target is also one of its input
        # segments (teacher-forced during training); estimate it with a
        # span-scaled carry-forward on a scratch state, then commit the
        # refined row — mirroring the probe-then-refine training scheme
        ratio = np.clip(fwd_gaps / np.maximum(back_gaps, 1e-9), 0.0, 10.0)
        guess = state.e_hat_prev * ratio[:, None]
        scratch = _gather_lanes(state, np.arange(P))
        _, probe_log = _np_row_pass(model, scratch, back_gaps,
                                    state.e_hat_prev, fwd_gaps, guess,
                                    te_rows)
        est = model.predictions_from_log(probe_log)
        _, pred_log = _np_row_pass(model, state, back_gaps,
                                   state.e_hat_prev, fwd_gaps, est, te_rows)
        e_hat = model.predictions_from_log(pred_log)
        state.t_last = np.full(P, tau_k)
        state.e_last = e_hat
        state.e_hat_prev = e_hat
    return increments


@dataclass
class ForecastSeries:
    """Per-step engagement increments on a regular grid, with optional
    percentile bands (cumulative space)."""
    times: np.ndarray          # absolute target times, strictly increasing
    values: np.ndarray         # (K, 4) nonnegative increments
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def cumulative(self, base: np.ndarray | None = None) -> np.ndarray:
        start = np.zeros(N_CHANNELS) if base is None else base
        return start[None, :] + np.cumsum(self.values, axis=0)


def rollout_trajectory(model: ICMambaModel, post: PostRecord, tau_obs: float,
                       tau_step: float, horizon: float,
                       chunk: int | None = None) -> ForecastSeries:
    """K = floor(horizon / tau_step) autoregressive steps after the
    observation window.  `chunk` bounds the steps per internal call;
    results are identical for any chunking."""
    if tau_step <= 0:
        raise ValueError("tau_step must be positive")
    if horizon < tau_step:
        raise ValueError("horizon must cover at least one step")
    K = int(np.floor(horizon / tau_step))
    start = post.t0 + tau_obs
    grid = start + tau_step * np.arange(1, K + 1)
    state, _ = init_rollout(model, [post], start, next_time=grid[0])
    values = np.zeros((K, N_CHANNELS))
    step = chunk or K
    for lo in range(0, K, step):
        hi = min(lo + step, K)
        values[lo:hi] = rollout_steps(model, state, grid[lo:hi])[:, 0]
    return ForecastSeries(times=grid, values=values)


# -- two-tier composition ---------------------------------------------

@dataclass
class OpinionGroup:
    opinion: str
    posts: list[PostRecord]

    def sorted_posts(self) -> list[PostRecord]:
        return sorted(self.posts, key=lambda p: (p.t0, p.post_id))


def tier2_features(model: ICMambaModel, summaries: np.ndarray,
                   post_times: np.ndarray) -> np.ndarray:
    """Group-level feature vector (D,): mean output of the tier-2 block
    run over per-post hidden summaries in chronological order."""
    c = model.config
    u = summaries @ model.tier2_in_w.data.T
    gaps = np.diff(post_times, prepend=post_times[0] if post_times.size else 0.0)
    te = _np_te_rows(model, post_times, np.zeros((post_times.size, N_CHANNELS)),
                     post_times[-1] if post_times.size else 0.0)
    rows = np.zeros_like(u)
    lane = _BlockState(1, c.d_model, c.n_state,
                       model.tier2_block.conv_kernel.data.shape[1])
    for j in range(post_times.size):
        rows[j] = _np_block_rows(model, lane, model.tier2_block,
                                 u[j:j + 1], te[j:j + 1], gaps[j:j + 1])[0]
    return rows.mean(axis=0)


def tier2_correction(model: ICMambaModel, summaries: np.ndarray,
                     post_times: np.ndarray) -> np.ndarray:
    """Multiplicative per-channel correction from group-level dynamics.

    `summaries` holds per-post hidden summaries (chronological order);
    with the correction head at zero this is exactly the identity."""
    feats = tier2_features(model, summaries, post_times)
    z = feats @ model.tier2_corr_w.data.T + model.tier2_corr_b.data
    return np.exp(z)


def two_tier_forecast(model: ICMambaModel, group: OpinionGroup,
                      tau_obs_end: float, tau_step: float,
                      horizon: float) -> ForecastSeries:
    """Collective trajectory: corrected sum of per-post rollouts.

    `tau_obs_end` is the absolute end of the shared observation window;
    posts created after it are ignored (they were unseen at issue time).
    """
    posts = [p for p in group.sorted_posts() if p.t0 <= tau_obs_end]
    if not posts:
        raise ValueError("empty opinion group within the observation window")
    K = int(np.floor(horizon / tau_step))
    grid = tau_obs_end + tau_step * np.arange(1, K + 1)
    state, final_u = init_rollout(model, posts, tau_obs_end,
                                  next_time=grid[0])
    increments = rollout_steps(model, state, grid)       # (K, P, 4)
    summed = increments.sum(axis=1)
    factors = tier2_correction(model, final_u,
                               np.array([p.t0 for p in posts]))
    return ForecastSeries(times=grid, values=summed * factors[None, :])
