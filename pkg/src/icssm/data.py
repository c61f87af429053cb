"""Interval-censored dataset records, JSON-Lines I/O, validation,
temporal splitting, censoring, and tail-distribution insights."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

CHANNELS = ("likes", "shares", "comments", "emojis")
N_CHANNELS = len(CHANNELS)


class DataValidationError(ValueError):
    """Malformed dataset content; message carries line number and reason."""


@dataclass
class ObservationRecord:
    """One observation: timestamp plus per-interval counts accrued since
    the previous observation (not running totals)."""
    t: float
    e: np.ndarray  # (4,) nonnegative integers, channel order CHANNELS

    def to_json(self) -> dict:
        return {"t": self.t, "e": {c: int(v) for c, v in zip(CHANNELS, self.e)}}


@dataclass
class UserMeta:
    user_id: str
    followers: int = 0
    verified: bool = False
    account_age_days: int = 0


@dataclass
class PostRecord:
    post_id: str
    t0: float
    text: str
    user: UserMeta
    opinion: str | None = None
    history: list[ObservationRecord] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.history)

    def observation_times(self) -> np.ndarray:
        return np.array([o.t for o in self.history], dtype=np.float64)

    def counts(self) -> np.ndarray:
        return np.array([o.e for o in self.history], dtype=np.float64).reshape(-1, N_CHANNELS)

    def cumulative_at(self, t: float) -> np.ndarray:
        """Summed counts over observations with timestamp <= t."""
        total = np.zeros(N_CHANNELS)
        for o in self.history:
            if o.t <= t:
                total += o.e
        return total

    def in_window(self, tau_obs: float) -> list[ObservationRecord]:
        return [o for o in self.history if o.t <= self.t0 + tau_obs]

    def to_json(self) -> dict:
        return {
            "post_id": self.post_id,
            "t0": self.t0,
            "text": self.text,
            "user": {
                "user_id": self.user.user_id,
                "followers": self.user.followers,
                "verified": self.user.verified,
                "account_age_days": self.user.account_age_days,
            },
            "opinion": self.opinion,
            "observations": [o.to_json() for o in self.history],
        }


@dataclass
class DatasetManifest:
    name: str
    opinions: list[str]
    channels: list[str] = field(default_factory=lambda: list(CHANNELS))
    s_ref: float = 3600.0          # median observation gap, seconds
    split_boundaries: dict = field(default_factory=dict)
    generator: dict | None = None  # sim config + seed when synthetic
    min_posts_per_opinion: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        return DatasetManifest(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "DatasetManifest":
        return DatasetManifest.from_json(json.loads(Path(path).read_text()))


def _parse_post(obj: dict, lineno: int) -> PostRecord:
    def fail(reason: str):
        raise DataValidationError(f"line {lineno}: {reason}")

    for key in ("post_id", "t0", "text", "user", "observations"):
        if key not in obj:
            fail(f"missing field '{key}'")
    u = obj["user"]
    user = UserMeta(
        user_id=str(u.get("user_id", "")),
        followers=int(u.get("followers", 0)),
        verified=bool(u.get("verified", False)),
        account_age_days=int(u.get("account_age_days", 0)),
    )
    if user.followers < 0:
        fail("negative follower count")
    t0 = float(obj["t0"])
    history = []
    prev_t = None
    for obs in obj["observations"]:
        t = float(obs["t"])
        if t < t0:
            fail("pre-creation observation")
        if prev_t is not None and t <= prev_t:
            fail("observation times not strictly increasing")
        prev_t = t
        e_raw = obs["e"]
        e = np.array([e_raw.get(c, 0) for c in CHANNELS], dtype=np.int64)
        if np.any(e < 0):
            fail("negative engagement count")
        history.append(ObservationRecord(t=t, e=e))
    return PostRecord(
        post_id=str(obj["post_id"]),
        t0=t0,
        text=str(obj["text"]),
        user=user,
        opinion=obj.get("opinion"),
        history=history,
    )


def validate_and_load(path) -> tuple[list[PostRecord], DatasetManifest | None]:
    """Load a JSON-Lines dataset; the sidecar manifest is picked up when
    present next to the data file."""
    path = Path(path)
    posts = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"line {lineno}: invalid JSON ({exc.msg})")
            posts.append(_parse_post(obj, lineno))
    manifest_path = path.with_suffix(".manifest.json")
    manifest = DatasetManifest.load(manifest_path) if manifest_path.exists() else None
    return posts, manifest


def save_posts(posts: list[PostRecord], path) -> None:
    with Path(path).open("w") as fh:
        for p in posts:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def manifest_path_for(data_path) -> Path:
    return Path(data_path).with_suffix(".manifest.json")


def median_gap(posts: list[PostRecord]) -> float:
    gaps = []
    for p in posts:
        t = np.concatenate([[p.t0], p.observation_times()])
        gaps.extend(np.diff(t))
    gaps = [g for g in gaps if g > 0]
    return float(np.median(gaps)) if gaps else 3600.0


def censor_to_intervals(channel_events: list[np.ndarray], t0: float,
                        observation_times) -> list[ObservationRecord]:
    """Bin per-channel event streams into interval counts.

    e_j counts events in (t_{j-1}, t_j], with t_0 the post creation time.
    `channel_events` is one event-time array per engagement channel.
    """
    obs = np.asarray(observation_times, dtype=np.float64)
    if obs.size and np.any(np.diff(obs) <= 0):
        raise ValueError("observation times must be strictly increasing")
    if obs.size and obs[0] < t0:
        raise ValueError("observation times must not precede the post creation")
    edges = np.concatenate([[t0], obs])
    records = []
    counts = np.zeros((obs.size, N_CHANNELS), dtype=np.int64)
    for c, ev in enumerate(channel_events):
        ev = np.asarray(ev, dtype=np.float64)
        if ev.size == 0:
            continue
        # searchsorted: edges[idx-1] < ev <= edges[idx], so interval idx-1
        idx = np.searchsorted(edges, ev, side="left") - 1
        valid = (idx >= 0) & (idx < obs.size)
        np.add.at(counts[:, c], idx[valid], 1)
    for j in range(obs.size):
        records.append(ObservationRecord(t=float(obs[j]), e=counts[j].copy()))
    return records


def temporal_split(posts: list[PostRecord],
                   fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
                   min_intervals: int = 4):
    """Chronological train/validation/test split by posting time.

    Posts with fewer than `min_intervals` observation intervals are
    dropped before splitting.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    kept = [p for p in posts if p.m >= min_intervals]
    kept.sort(key=lambda p: (p.t0, p.post_id))
    n = len(kept)
    if n == 0:
        raise ValueError("no posts survive the minimum-interval filter")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    train = kept[:n_train]
    val = kept[n_train:n_train + n_val]
    test = kept[n_train + n_val:]
    if not train or not val or not test:
        raise ValueError("a split slice is empty; need more posts")
    return train, val, test


def eccdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Survival function P(X >= k) at each distinct observed value."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("eccdf requires nonempty input")
    ks = np.unique(values)
    n = values.size
    # P(X >= k) = fraction of samples at or above k
    surv = np.array([(values >= k).sum() / n for k in ks], dtype=np.float64)
    return ks.astype(np.float64), surv


def powerlaw_alpha(values, x_min: float = 1.0) -> float | None:
    """Continuous MLE exponent over the tail x >= x_min.

    Returns None when the estimate degenerates (all tail values equal
    x_min, or an empty tail).
    """
    if x_min < 1:
        raise ValueError("x_min must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    tail = values[values >= x_min]
    if tail.size == 0:
        raise ValueError("no values at or beyond x_min")
    log_sum = np.log(tail / x_min).sum()
    if log_sum <= 0:
        return None
    return 1.0 + tail.size / log_sum


def eccdf_and_alpha(values, x_min: float = 1.0):
    """ECCDF points plus the tail exponent estimate for one channel."""
    ks, surv = eccdf(values)
    alpha = powerlaw_alpha(values, x_min)
    return ks, surv, alpha
