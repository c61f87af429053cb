"""The four evaluation protocols: overall scoring, the early-window
sweep, staged next-interval evaluation, and rolling opinion-level
forecasting with percentile bands.

Protocols never mutate model parameters; they only run forward passes
and rollouts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import N_CHANNELS, PostRecord
from .metrics import compute_metrics, macro_f1
from .model import (ICMambaModel, OpinionGroup, init_rollout, rollout_steps,
                    tier2_correction)

DEFAULT_CHECKPOINTS_MIN = (15, 30, 45, 60, 90, 120, 180, 240, 300, 360)
DEFAULT_WINDOWS_DAYS = (3, 7, 10)

# forward-gap bounds per stage, seconds
STAGE_BOUNDS = {"early": 3600.0, "mid": 86400.0, "late": 7 * 86400.0}
FIXED_WINDOW = 6 * 3600.0


def _sorted(posts: list[PostRecord]) -> list[PostRecord]:
    return sorted(posts, key=lambda p: p.post_id)


def overall_evaluation(model: ICMambaModel, posts: list[PostRecord],
                       tau_obs: float) -> dict:
    """Total-engagement forecasting (log1p space) and opinion
    classification over one dataset."""
    posts = _sorted(posts)
    if not posts:
        raise ValueError("empty dataset")
    preds = np.array([model.predict_total(p, tau_obs) for p in posts])
    truths = np.array([p.cumulative_at(np.inf) for p in posts])
    report = compute_metrics(np.log1p(preds), np.log1p(truths))
    labels = model.config.opinion_labels
    labelled = [p for p in posts if p.opinion in labels]
    if labelled:
        pred_labels = [labels[int(np.argmax(model.classify_opinion(p, tau_obs)))]
                       for p in labelled]
        report["macro_f1"] = macro_f1(pred_labels,
                                      [p.opinion for p in labelled], labels)
    return report


def early_prediction_sweep(model: ICMambaModel, posts: list[PostRecord],
                           checkpoints_min=DEFAULT_CHECKPOINTS_MIN) -> list[dict]:
    """Fig. 4a protocol: total-engagement error as a function of how much
    history is visible, one row per checkpoint."""
    posts = _sorted(posts)
    if not posts:
        raise ValueError("empty dataset")
    spans = [p.history[-1].t - p.t0 for p in posts if p.history]
    if not spans:
        raise ValueError("no posts with observations")
    max_span = max(spans)
    rows = []
    truths = np.log1p(np.array([p.cumulative_at(np.inf) for p in posts]))
    for minutes in checkpoints_min:
        tau_obs = minutes * 60.0
        if tau_obs > max_span:
            raise ValueError(
                f"checkpoint {minutes} min exceeds the available history")
        preds = np.log1p(np.array(
            [model.predict_total(p, tau_obs) for p in posts]))
        row = {"checkpoint_min": int(minutes)}
        row.update(compute_metrics(preds, truths))
        rows.append(row)
    return rows


def staged_next_eval(model: ICMambaModel, posts: list[PostRecord],
                     stage: str) -> dict:
    """Next-interval prediction restricted by transition timing.

    Gap stages (early/mid/late) keep transitions whose forward gap is
    within the stage bound and use the full preceding history; fixed6h
    predicts every observation from exactly the 6 hours of history
    before it.
    """
    if stage not in ("fixed6h",) + tuple(STAGE_BOUNDS):
        raise ValueError(f"unknown stage '{stage}'")
    posts = _sorted(posts)
    preds, truths = [], []
    for post in posts:
        if stage == "fixed6h":
            for k, target in enumerate(post.history):
                kept = [o for o in post.history
                        if target.t - FIXED_WINDOW <= o.t <= target.t]
                trimmed = PostRecord(post_id=post.post_id, t0=post.t0,
                                     text=post.text, user=post.user,
                                     opinion=post.opinion, history=kept)
                out = model.forward_post(trimmed, target.t - post.t0)
                pred_log = out["pred_log"].data
                preds.append(model.predictions_from_log(pred_log[-2]))
                truths.append(np.asarray(target.e, float))
        else:
            bound = STAGE_BOUNDS[stage]
            if not post.history:
                continue
            out = model.forward_post(post, post.history[-1].t - post.t0)
            pred_log = out["pred_log"].data
            times = out["times"]
            for j in range(len(times) - 1):
                if times[j + 1] - times[j] <= bound:
                    preds.append(model.predictions_from_log(pred_log[j]))
                    truths.append(np.asarray(post.history[j].e, float))
    if not preds:
        raise ValueError(f"no qualifying transitions for stage '{stage}'")
    report = {"stage": stage}
    report.update(compute_metrics(np.log1p(np.array(preds)),
                                  np.log1p(np.array(truths))))
    return report


# -- rolling opinion-level forecasting ---------------------------------

@dataclass
class DynamicForecastRecord:
    """One target time of the rolling opinion forecast (cumulative
    engagement space)."""
    target_time: float
    point: np.ndarray               # (4,)
    lower: np.ndarray               # (4,)
    upper: np.ndarray               # (4,)
    issued_at: float | None         # latest contributing issue, None if observed

    def to_json(self) -> dict:
        return {"target_time": self.target_time,
                "point": self.point.tolist(),
                "lower": self.lower.tolist(),
                "upper": self.upper.tolist(),
                "issued_at": self.issued_at}


def group_cumulative(posts: list[PostRecord], t: float) -> np.ndarray:
    total = np.zeros(N_CHANNELS)
    for p in posts:
        total += p.cumulative_at(t)
    return total


def _issue_forecast(model: ICMambaModel, posts: list[PostRecord],
                    issue_time: float, targets: np.ndarray,
                    stride: float | None = None) -> np.ndarray:
    """Cumulative trajectory for targets after `issue_time`, from the
    two-tier composition over the posts visible at issue time."""
    visible = [p for p in posts if p.t0 <= issue_time]
    base = group_cumulative(visible, issue_time)
    if not visible:
        return np.broadcast_to(base, (targets.size, N_CHANNELS)).copy()
    state, final_u = init_rollout(model, visible, issue_time,
                                  next_time=targets[0])
    increments = rollout_steps(model, state, targets, stride=stride).sum(axis=1)
    factors = tier2_correction(model, final_u,
                               np.array([p.t0 for p in visible]))
    return base[None, :] + np.cumsum(increments * factors[None, :], axis=0)


def dynamic_opinion_forecast(model: ICMambaModel, group: OpinionGroup,
                             windows_days=DEFAULT_WINDOWS_DAYS,
                             horizon_days: float = 28.0,
                             step: float = 300.0,
                             refresh: float = 6 * 3600.0) -> dict:
    """Rolling re-forecasting of an opinion's collective engagement.

    For each initial window: forecasts are re-issued every `refresh`
    seconds from all data available so far; each target time's band is
    the 2.5/97.5 percentile over every forecast issued for it, and the
    point value is the latest forecast (observed truth before the first
    issue).  Returns {window_days: [DynamicForecastRecord] * K}.

    Rollouts advance internally in refresh-sized strides (the scale the
    predictor is trained on) and spread each stride's increment over the
    5-minute emission grid.
    """
    posts = group.sorted_posts()
    if not posts:
        raise ValueError("empty opinion group")
    t_start = posts[0].t0
    horizon = horizon_days * 86400.0
    K = int(np.floor(horizon / step))
    grid = t_start + step * np.arange(1, K + 1)
    last_obs = max(p.history[-1].t for p in posts if p.history)
    results = {}
    for w in windows_days:
        first_issue = t_start + w * 86400.0
        if first_issue > last_obs:
            raise ValueError(
                f"window of {w} days is longer than the available data")
        issue_times = np.arange(first_issue, t_start + horizon, refresh)
        # forecasts[i, g] is issue i's cumulative forecast for grid[g]
        forecasts = np.full((issue_times.size, K, N_CHANNELS), np.nan)
        for i, R in enumerate(issue_times):
            future = grid > R
            forecasts[i, future] = _issue_forecast(model, posts, R,
                                                   grid[future],
                                                   stride=refresh)
        records = []
        for g in range(K):
            issued = ~np.isnan(forecasts[:, g, 0])
            if not issued.any():
                value = group_cumulative(posts, grid[g])
                records.append(DynamicForecastRecord(
                    target_time=grid[g], point=value, lower=value.copy(),
                    upper=value.copy(), issued_at=None))
                continue
            pool = forecasts[issued, g]
            latest = np.nonzero(issued)[0][-1]
            point = forecasts[latest, g]
            # the band always contains the current point estimate
            lower = np.minimum(np.percentile(pool, 2.5, axis=0), point)
            upper = np.maximum(np.percentile(pool, 97.5, axis=0), point)
            records.append(DynamicForecastRecord(
                target_time=grid[g], point=point, lower=lower, upper=upper,
                issued_at=float(issue_times[latest])))
        results[w] = records
    return results


def band_coverage(records: list[DynamicForecastRecord],
                  posts: list[PostRecord]) -> dict:
    """Empirical coverage and mean width of the forecast bands, measured
    against the observed cumulative truth on forecasted targets only."""
    hits = total = 0
    widths = []
    for rec in records:
        if rec.issued_at is None:
            continue
        truth = group_cumulative(posts, rec.target_time)
        hits += int(np.sum((rec.lower <= truth) & (truth <= rec.upper)))
        total += N_CHANNELS
        widths.append(np.mean(rec.upper - rec.lower))
    if total == 0:
        raise ValueError("no forecasted targets")
    return {"coverage": hits / total, "mean_band_width": float(np.mean(widths)),
            "n_targets": total // N_CHANNELS}
