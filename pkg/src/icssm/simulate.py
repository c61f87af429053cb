"""Synthetic engagement generation: self-exciting event streams per
channel (exponential kernel, Ogata thinning), crawler-like observation
schedules, and whole-dataset assembly with per-opinion regimes.

Per-post RNG streams are derived from (seed, post_id, channel) so
simulation order and parallelism never change the output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import (CHANNELS, N_CHANNELS, DatasetManifest, ObservationRecord,
                   PostRecord, UserMeta, censor_to_intervals, median_gap)

HOUR = 3600.0


@dataclass
class OpinionSpec:
    """Generative regime for one opinion: per-channel baseline rates,
    excitation strength, kernel decay, and text phrasing."""
    name: str
    mu_per_hour: list[float]             # baseline event rate per channel
    alpha_br: float                      # branching ratio, must stay < 1
    beta_per_hour: float                 # exponential kernel decay rate
    phrases: list[str] = field(default_factory=list)


@dataclass
class SimConfig:
    opinions: list[OpinionSpec]
    posts_per_opinion: int = 100
    n_users: int = 50
    horizon: float = 24 * HOUR           # engagement horizon per post
    posting_span: float = 30 * 86400.0   # window of post creation times
    obs_gap_min: float = 300.0           # log-uniform gap law, seconds
    obs_gap_max: float = 12 * HOUR
    early_densify_hours: float = 6.0     # x4 observation rate early on
    early_densify_factor: float = 4.0
    epoch_origin: float = 1.6e9          # base absolute time, seconds

    def validate(self) -> None:
        for op in self.opinions:
            if not 0 <= op.alpha_br < 1:
                raise ValueError(
                    f"opinion '{op.name}': branching ratio must be in [0, 1)")
            if op.beta_per_hour <= 0:
                raise ValueError(f"opinion '{op.name}': beta must be positive")
            if any(m < 0 for m in op.mu_per_hour):
                raise ValueError(f"opinion '{op.name}': negative baseline rate")
            if len(op.mu_per_hour) != N_CHANNELS:
                raise ValueError(
                    f"opinion '{op.name}': need {N_CHANNELS} channel rates")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "SimConfig":
        ops = [OpinionSpec(**o) for o in obj.pop("opinions")]
        return SimConfig(opinions=ops, **obj)

    @staticmethod
    def load(path) -> "SimConfig":
        return SimConfig.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def default_sim_config() -> SimConfig:
    """Three separable opinion regimes at desk scale."""
    return SimConfig(
        opinions=[
            OpinionSpec("hoax_theory", [6.0, 2.0, 1.5, 1.0], 0.55, 1.2,
                        ["the official story is a hoax",
                         "they are hiding the truth from you",
                         "wake up and question everything"]),
            OpinionSpec("policy_debate", [2.0, 0.6, 1.8, 0.3], 0.25, 0.6,
                        ["the new policy deserves scrutiny",
                         "evidence should drive regulation",
                         "both sides raise fair points"]),
            OpinionSpec("community_support", [1.0, 0.2, 0.5, 0.8], 0.10, 2.5,
                        ["sending support to everyone affected",
                         "our community stands together",
                         "grateful for the volunteers helping out"]),
        ],
    )


def _stream_rng(seed: int, post_id: str, label: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{post_id}/{label}".encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def hawkes_events(mu: float, alpha_br: float, beta: float, horizon: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Event times on (0, horizon] from an exponential-kernel self-exciting
    process with baseline `mu`, branching ratio `alpha_br`, and kernel
    alpha_br * beta * exp(-beta * t), via Ogata thinning.

    Rates are per the same time unit as `horizon`.
    """
    if alpha_br >= 1:
        raise ValueError("supercritical configuration (branching ratio >= 1)")
    if mu < 0 or beta <= 0:
        raise ValueError("mu must be nonnegative and beta positive")
    events = []
    t = 0.0
    excess = 0.0  # intensity above baseline at current t (just after events)
    jump = alpha_br * beta
    while True:
        lam_bar = mu + excess
        if lam_bar <= 0:
            break
        w = rng.exponential(1.0 / lam_bar)
        t = t + w
        if t > horizon:
            break
        excess = excess * np.exp(-beta * w)
        if rng.uniform() * lam_bar <= mu + excess:
            events.append(t)
            excess += jump
    return np.asarray(events)


def observation_schedule(cfg: SimConfig, horizon: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Gaps are log-uniform in [obs_gap_min, obs_gap_max], densified by
    `early_densify_factor` during the first `early_densify_hours`.
    Returned times are offsets from the post creation."""
    times = []
    t = 0.0
    early = cfg.early_densify_hours * HOUR
    lo, hi = np.log(cfg.obs_gap_min), np.log(cfg.obs_gap_max)
    while True:
        gap = float(np.exp(rng.uniform(lo, hi)))
        if t < early:
            gap /= cfg.early_densify_factor
        t += gap
        if t > horizon:
            break
        times.append(t)
    return np.asarray(times)


def simulate_post_events(cfg: SimConfig, spec: OpinionSpec, post_id: str,
                         seed: int) -> list[np.ndarray]:
    """Per-channel event-time offsets for one post, deterministic in
    (seed, post_id, channel)."""
    horizon_h = cfg.horizon / HOUR
    streams = []
    for c, channel in enumerate(CHANNELS):
        rng = _stream_rng(seed, post_id, f"events/{channel}")
        ev_hours = hawkes_events(spec.mu_per_hour[c], spec.alpha_br,
                                 spec.beta_per_hour, horizon_h, rng)
        streams.append(ev_hours * HOUR)
    return streams


def _post_text(spec: OpinionSpec, rng: np.random.Generator) -> str:
    if not spec.phrases:
        return ""
    k = rng.integers(1, len(spec.phrases) + 1)
    idx = rng.choice(len(spec.phrases), size=k, replace=False)
    return ". ".join(spec.phrases[i] for i in sorted(idx))


def simulate_dataset(cfg: SimConfig, seed: int,
                     name: str = "synthetic") -> tuple[list[PostRecord], DatasetManifest]:
    """Full synthetic corpus: events, censoring, text, users, manifest."""
    cfg.validate()
    posts: list[PostRecord] = []
    for spec in cfg.opinions:
        for i in range(cfg.posts_per_opinion):
            post_id = f"{spec.name}-{i:05d}"
            meta_rng = _stream_rng(seed, post_id, "meta")
            t0 = cfg.epoch_origin + meta_rng.uniform(0, cfg.posting_span)
            events = simulate_post_events(cfg, spec, post_id, seed)
            obs_rng = _stream_rng(seed, post_id, "schedule")
            rel_obs = observation_schedule(cfg, cfg.horizon, obs_rng)
            history = censor_to_intervals(events, 0.0, rel_obs)
            history = [ObservationRecord(t=t0 + o.t, e=o.e) for o in history]
            user = UserMeta(
                user_id=f"user-{meta_rng.integers(cfg.n_users):04d}",
                followers=int(np.exp(meta_rng.uniform(2, 12))),
                verified=bool(meta_rng.uniform() < 0.2),
                account_age_days=int(meta_rng.uniform(30, 4000)),
            )
            posts.append(PostRecord(
                post_id=post_id, t0=t0, text=_post_text(spec, meta_rng),
                user=user, opinion=spec.name, history=history,
            ))
    posts.sort(key=lambda p: (p.t0, p.post_id))
    manifest = DatasetManifest(
        name=name,
        opinions=[s.name for s in cfg.opinions],
        s_ref=median_gap(posts),
        generator={"config": cfg.to_json(), "seed": seed},
    )
    return posts, manifest


def powerlaw_samples(alpha: float, x_min: float, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF samples from a continuous power law with the given
    exponent; used as an independent oracle for the tail estimator."""
    u = rng.uniform(size=n)
    return x_min * (1 - u) ** (-1.0 / (alpha - 1.0))
