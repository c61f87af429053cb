"""Pretraining and fine-tuning loops.

The pretraining objective combines a next-interval prediction loss in
log1p space with a temporal-coherence penalty that ties consecutive
hidden states through the learned continuous-time generator:

    L_total = L_pred + lambda * L_temp

Teacher forcing anneals linearly from 1.0 to 0.5; when a row is not
teacher-forced, the model's own (detached) prediction from a first pass
fills the predicted-engagement segment of the interval vector.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_CHANNELS, PostRecord
from .model import (ICMambaModel, OpinionGroup, init_rollout, rollout_steps,
                    tier2_features)
from .numerics import OptimizerConfig, OptimizerState, optimizer_step


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lambda_temp: float = 0.1
    tau_obs: float = 6 * 3600.0
    patience: int = 5
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_pred: float
    train_temp: float
    val_loss: float
    p_tf: float
    seconds: float

    def to_json(self) -> dict:
        return {k: (round(v, 6) if isinstance(v, float) else v)
                for k, v in self.__dict__.items()}


@dataclass
class TrainReport:
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


# -- losses ------------------------------------------------------------

def loss_pred(pred_log: Tensor, target_counts: np.ndarray) -> Tensor:
    """Next-interval prediction error in log1p space.

    `pred_log` holds L rows; rows 0..m-1 predict observations 1..m whose
    raw counts arrive in `target_counts` (m, 4).  Mean over entries, so
    posts of different lengths weigh equally.
    """
    m = np.asarray(target_counts).shape[0]
    if m == 0:
        raise ValueError("no prediction targets in the observation window")
    target = np.log1p(np.asarray(target_counts, dtype=np.float64))
    diff = ad.add(pred_log[:m], Tensor(-target))
    return ad.tmean(ad.square(diff))


def loss_temp(hidden: Tensor, gaps: np.ndarray, a_tilde: Tensor,
              s_ref: float) -> Tensor:
    """Temporal-coherence penalty on consecutive hidden states.

    Each transition j -> j+1 compares h_{j+1} with the free evolution
    exp((dt_j / s_ref) * A) h_j; gaps are the raw seconds between the
    rows (normalized by s_ref, matching the scan's discretization
    convention).  Mean over transitions and state entries.
    """
    L = hidden.data.shape[0]
    if L < 2:
        return Tensor(0.0)
    gn = np.asarray(gaps, dtype=np.float64) / s_ref
    if gn.shape[0] != L - 1:
        raise ValueError("need one gap per transition")
    if np.any(gn < 0):
        raise ValueError("gaps must be nonnegative")
    D, N = hidden.data.shape[1:]
    factor = ad.exp(ad.mul(a_tilde.reshape((1, D, N)),
                           Tensor(gn.reshape(-1, 1, 1))))
    evolved = ad.mul(factor, hidden[:L - 1])
    diff = ad.add(hidden[1:], ad.mul(evolved, -1.0))
    return ad.tmean(ad.square(diff))


def loss_temp_oracle(hidden: np.ndarray, gaps: np.ndarray,
                     a_tilde: np.ndarray, s_ref: float) -> float:
    """Independent per-transition loop for `loss_temp`."""
    L = hidden.shape[0]
    if L < 2:
        return 0.0
    total = 0.0
    for j in range(L - 1):
        factor = np.exp((gaps[j] / s_ref) * a_tilde)
        total += np.mean((hidden[j + 1] - factor * hidden[j]) ** 2)
    return total / (L - 1)


def total_loss(l_pred: Tensor, l_temp: Tensor, lambda_temp: float) -> Tensor:
    return ad.add(l_pred, ad.mul(l_temp, lambda_temp))


# -- pretraining -------------------------------------------------------

def teacher_forcing_prob(epoch: int, n_epochs: int, start: float = 1.0,
                         end: float = 0.5) -> float:
    """Linear anneal over the epoch index (0-based)."""
    if n_epochs <= 1:
        return end
    frac = epoch / (n_epochs - 1)
    return start + (end - start) * frac


def _post_losses(model: ICMambaModel, post: PostRecord, tau_obs: float,
                 p_tf: float, rng: np.random.Generator,
                 lambda_temp: float) -> tuple[Tensor, float, float]:
    """Taped total loss for one post plus its component values."""
    c = model.config
    next_inputs = None
    if p_tf < 1.0:
        # first pass: the model's own predictions, detached, replace the
        # ground-truth segment on rows the coin flip leaves un-forced
        probe = model.forward_post(post, tau_obs)
        counts = probe["counts"]
        m = counts.shape[0] - 1
        preds = model.predictions_from_log(probe["pred_log"].data)
        next_inputs = np.zeros((m + 1, N_CHANNELS))
        next_inputs[:-1] = counts[1:]
        use_pred = rng.random(m) >= p_tf
        next_inputs[:-1][use_pred] = preds[:-1][use_pred]
    out = model.forward_post(post, tau_obs, next_inputs)
    l_pred = loss_pred(out["pred_log"], out["counts"][1:])
    l_temp = loss_temp(out["hiddens"][-1], out["back_gaps"][1:],
                       model.blocks[-1].a_tilde(), c.s_ref)
    l_total = total_loss(l_pred, l_temp, lambda_temp)
    return l_total, float(l_pred.data), float(l_temp.data)


def evaluate_loss(model: ICMambaModel, posts: list[PostRecord],
                  cfg: TrainConfig) -> float:
    """Mean total loss with full teacher forcing (no parameter updates)."""
    losses = []
    for post in posts:
        if not post.in_window(cfg.tau_obs):
            continue
        l_total, _, _ = _post_losses(model, post, cfg.tau_obs, 1.0,
                                     np.random.default_rng(0),
                                     cfg.lambda_temp)
        losses.append(float(l_total.data))
    if not losses:
        raise ValueError("no usable posts for evaluation")
    return float(np.mean(losses))


def pretrain(model: ICMambaModel, train_posts: list[PostRecord],
             val_posts: list[PostRecord], cfg: TrainConfig,
             log_stream=None) -> TrainReport:
    """Minimize L_total over the training posts with early stopping on
    the validation loss; restores the best parameters before returning.

    Writes one JSON line of epoch statistics to `log_stream` per epoch.
    """
    usable = [p for p in train_posts if p.in_window(cfg.tau_obs)]
    if not usable:
        raise ValueError("no training posts with in-window observations")
    params = model.parameters()
    opt_state = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_data = None
    stopped = False
    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        p_tf = teacher_forcing_prob(
            epoch, cfg.epochs, model.config.teacher_forcing_start,
            model.config.teacher_forcing_end)
        order = rng.permutation(len(usable))
        sum_total = sum_pred = sum_temp = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[lo:lo + cfg.batch_size]]
            model.zero_grad()
            for post in batch:
                l_total, lp, lt = _post_losses(
                    model, post, cfg.tau_obs, p_tf, rng, cfg.lambda_temp)
                scaled = ad.mul(l_total, 1.0 / len(batch))
                scaled.backward()
                sum_total += float(l_total.data)
                sum_pred += lp
                sum_temp += lt
            grads = {p.name: p.grad for p in params if p.grad is not None}
            optimizer_step(params, grads, opt_state, cfg.optimizer)
        n = len(usable)
        val = evaluate_loss(model, val_posts, cfg) if val_posts else sum_total / n
        stats = EpochStats(epoch=epoch, train_loss=sum_total / n,
                           train_pred=sum_pred / n, train_temp=sum_temp / n,
                           val_loss=val, p_tf=p_tf,
                           seconds=time.perf_counter() - t_start)
        history.append(stats)
        if log_stream is not None:
            log_stream.write(json.dumps(stats.to_json()) + "\n")
            log_stream.flush()
        if val < best_val - 1e-12:
            best_val = val
            best_epoch = epoch
            best_data = {p.name: p.data.copy() for p in params}
        elif epoch - best_epoch >= cfg.patience:
            stopped = True
            break
    if best_data is not None:
        for p in params:
            p.data = best_data[p.name]
    return TrainReport(history=history, best_epoch=best_epoch,
                       best_val_loss=float(best_val), stopped_early=stopped)


# -- fine-tuning -------------------------------------------------------

def _cross_entropy(logits: Tensor, label: int) -> Tensor:
    return ad.add(ad.logsumexp(logits, axis=0), ad.mul(logits[label], -1.0))


def finetune(model: ICMambaModel, posts: list[PostRecord], task: str,
             cfg: TrainConfig, freeze_encoder: bool = False,
             log_stream=None) -> TrainReport:
    """Supervised fine-tuning of a task head (plus the trunk).

    task "forecast": remainder head regresses log1p of the engagement
    accumulated after the observation window.  task "classify":
    cross-entropy on the opinion label (index in config.opinion_labels).
    """
    if task not in ("forecast", "classify"):
        raise ValueError(f"unknown fine-tuning task '{task}'")
    labels = model.config.opinion_labels
    if task == "classify":
        unknown = {p.opinion for p in posts} - set(labels)
        if unknown:
            raise ValueError(f"posts carry unlabelled opinions: {sorted(unknown)}")
    usable = [p for p in posts if p.in_window(cfg.tau_obs)]
    if not usable:
        raise ValueError("no posts with in-window observations")
    frozen = model.encoder.parameters() if freeze_encoder else []
    for p in frozen:
        p.requires_grad = False
    try:
        params = [p for p in model.parameters() if p.requires_grad]
        opt_state = OptimizerState()
        rng = np.random.default_rng(cfg.seed)
        history: list[EpochStats] = []
        for epoch in range(cfg.epochs):
            t_start = time.perf_counter()
            order = rng.permutation(len(usable))
            total = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [usable[i] for i in order[lo:lo + cfg.batch_size]]
                model.zero_grad()
                for post in batch:
                    out = model.forward_post(post, cfg.tau_obs)
                    if task == "forecast":
                        remainder = (post.cumulative_at(np.inf)
                                     - post.cumulative_at(post.t0 + cfg.tau_obs))
                        z = model.total_head_log(out)
                        diff = ad.add(z, Tensor(-np.log1p(remainder)))
                        loss = ad.tmean(ad.square(diff))
                    else:
                        logits = model.class_logits(out)
                        loss = _cross_entropy(logits, labels.index(post.opinion))
                    ad.mul(loss, 1.0 / len(batch)).backward()
                    total += float(loss.data)
                grads = {p.name: p.grad for p in params if p.grad is not None}
                optimizer_step(params, grads, opt_state, cfg.optimizer)
            stats = EpochStats(epoch=epoch, train_loss=total / len(usable),
                               train_pred=total / len(usable), train_temp=0.0,
                               val_loss=total / len(usable), p_tf=1.0,
                               seconds=time.perf_counter() - t_start)
            history.append(stats)
            if log_stream is not None:
                log_stream.write(json.dumps(stats.to_json()) + "\n")
                log_stream.flush()
    finally:
        for p in frozen:
            p.requires_grad = True
    return TrainReport(history=history,
                       best_epoch=len(history) - 1 if history else -1,
                       best_val_loss=history[-1].val_loss if history else np.inf,
                       stopped_early=False)


# -- tier-2 calibration -------------------------------------------------

def calibrate_corrections(model: ICMambaModel, groups: list[OpinionGroup],
                          issue_offsets: list[float], horizon: float,
                          tau_step: float = 300.0, targets_per_issue: int = 32,
                          steps: int = 800, lr: float = 0.05,
                          fit_features: bool = True,
                          stride: float | None = 6 * 3600.0,
                          inflation: float = 0.3) -> float:
    """Fit the tier-2 correction head on group-level rollouts.

    Per-interval predictions are conditional means in log1p space, so
    inverted increments systematically undershoot realized growth; the
    tier-2 multiplicative correction absorbs that bias at the opinion
    level.  For each (group, issue offset) the uncorrected rollout is
    computed once; only the correction head's weights are then optimized
    so corrected cumulative forecasts match the observed group
    cumulative in log1p space.  Returns the final (pre-inflation) loss.

    `inflation` is added to the per-channel log-factors after the fit.
    The squared-log fit targets the conditional mean, which still
    under-covers realized growth once forecasts are pooled into
    upper-percentile bands (the pool rarely overshoots the truth);
    deliberately conservative corrections restore two-sided pools.
    The point forecast is dominated by the observed base, so the
    inflation barely moves it.
    """
    samples = []
    for group in groups:
        posts = group.sorted_posts()
        if not posts:
            continue
        t_start = posts[0].t0
        last_obs = max(p.history[-1].t for p in posts if p.history)
        for off in issue_offsets:
            issue = t_start + off
            visible = [p for p in posts if p.t0 <= issue]
            if not visible or issue >= last_obs:
                continue
            K = int(np.floor((t_start + horizon - issue) / tau_step))
            if K <= 0:
                continue
            grid = issue + tau_step * np.arange(1, K + 1)
            state, final_u = init_rollout(model, visible, issue,
                                          next_time=grid[0])
            inc = rollout_steps(model, state, grid, stride=stride).sum(axis=1)
            cum = np.cumsum(inc, axis=0)
            feats = tier2_features(model, final_u,
                                   np.array([p.t0 for p in visible]))
            base = np.sum([p.cumulative_at(issue) for p in posts], axis=0)
            pick = np.unique(np.linspace(0, K - 1,
                                         targets_per_issue).astype(int))
            truth = np.stack([np.sum([p.cumulative_at(t) for p in posts],
                                     axis=0) for t in grid[pick]])
            samples.append((feats, base, cum[pick], truth))
    if not samples:
        raise ValueError("no usable calibration issues")
    params = [model.tier2_corr_b]
    if fit_features:
        params.append(model.tier2_corr_w)
    opt_state = OptimizerState()
    opt_cfg = OptimizerConfig(lr=lr, warmup_steps=0)
    loss_value = np.inf
    for _ in range(steps):
        for p in params:
            p.zero_grad()
        total = None
        for feats, base, cum, truth in samples:
            z = ad.add(ad.matmul(model.tier2_corr_w, Tensor(feats)),
                       model.tier2_corr_b)
            factors = ad.reshape(ad.exp(z), (1, N_CHANNELS))
            pred = ad.add(Tensor(base[None, :]),
                          ad.mul(Tensor(cum), factors))
            diff = ad.add(ad.log1p(pred), Tensor(-np.log1p(truth)))
            term = ad.tmean(ad.square(diff))
            total = term if total is None else ad.add(total, term)
        total = ad.mul(total, 1.0 / len(samples))
        total.backward()
        loss_value = float(total.data)
        grads = {p.name: p.grad for p in params}
        optimizer_step(params, grads, opt_state, opt_cfg)
    model.tier2_corr_b.data += inflation
    return loss_value
