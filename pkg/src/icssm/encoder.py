"""Content and sequence embedding: byte-level tokenization of post text,
discretized feature tokens for user metadata / timeline / engagement, and
a small default encoder (embedding table + mean pooling + dense layer).

The encoder is pluggable: anything mapping a TokenSequence to a fixed
(d_emb,) vector can replace the default.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

# fixed token ids
CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
BYTE_BASE = 3                      # 3..258 bytes 0..255
VERIFIED_TRUE = 259
VERIFIED_FALSE = 260
FOLLOWER_BASE = 261                # 21 log2 buckets
FOLLOWER_BUCKETS = 21
AGE_BASE = FOLLOWER_BASE + FOLLOWER_BUCKETS      # 282, 14 buckets
AGE_BUCKETS = 14
HOUR_BASE = AGE_BASE + AGE_BUCKETS               # 296, 24 tokens
GAP_BASE = HOUR_BASE + 24                        # 320, 20 log2 buckets
GAP_BUCKETS = 20
ENG_BASE = GAP_BASE + GAP_BUCKETS                # 340, 24 log2 buckets
ENG_BUCKETS = 24
VOCAB_SIZE = ENG_BASE + ENG_BUCKETS              # 364


@dataclass
class AblationFlags:
    """Segment switches mirroring the runnable ablation configurations."""
    no_text: bool = False
    no_user: bool = False
    no_time: bool = False


@dataclass
class TokenSequence:
    ids: list[int]
    tags: list[str]   # one of CLS, TEXT, SEP, USER, TIME, ENG per token

    def __len__(self):
        return len(self.ids)


def _log2_bucket(value: float, n_buckets: int) -> int:
    if value <= 0:
        return 0
    return min(int(np.log2(value + 1)), n_buckets - 1)


def tokenize_post(post, flags: AblationFlags | None = None,
                  tau_obs: float | None = None,
                  l_max: int = 512) -> TokenSequence:
    """Layout: CLS, text bytes, SEP, user tokens, SEP, time tokens, SEP,
    engagement tokens.  Ablated segments are omitted entirely; when the
    sequence exceeds `l_max` the text segment is truncated first, special
    tokens never."""
    flags = flags or AblationFlags()
    ids, tags = [CLS_ID], ["CLS"]

    text_ids = []
    if not flags.no_text:
        text_ids = [BYTE_BASE + b for b in post.text.encode("utf-8")]

    user_ids = []
    if not flags.no_user:
        u = post.user
        user_ids = [
            VERIFIED_TRUE if u.verified else VERIFIED_FALSE,
            FOLLOWER_BASE + _log2_bucket(u.followers, FOLLOWER_BUCKETS),
            AGE_BASE + _log2_bucket(u.account_age_days, AGE_BUCKETS),
        ]

    history = post.history if tau_obs is None else post.in_window(tau_obs)
    time_ids = []
    if not flags.no_time:
        time_ids = [HOUR_BASE + int(post.t0 % 86400) // 3600]
        prev = post.t0
        for obs in history:
            time_ids.append(GAP_BASE + _log2_bucket(obs.t - prev, GAP_BUCKETS))
            prev = obs.t

    eng_ids = [ENG_BASE + _log2_bucket(float(np.sum(obs.e)), ENG_BUCKETS)
               for obs in history]

    overhead = 1 + len(user_ids) + len(time_ids) + len(eng_ids) + 3
    budget = max(0, l_max - overhead)
    text_ids = text_ids[:budget]

    ids += text_ids
    tags += ["TEXT"] * len(text_ids)
    ids.append(SEP_ID); tags.append("SEP")
    ids += user_ids
    tags += ["USER"] * len(user_ids)
    ids.append(SEP_ID); tags.append("SEP")
    ids += time_ids
    tags += ["TIME"] * len(time_ids)
    ids.append(SEP_ID); tags.append("SEP")
    ids += eng_ids
    tags += ["ENG"] * len(eng_ids)
    return TokenSequence(ids=ids, tags=tags)


@dataclass
class EncoderParams:
    embed: Parameter      # (VOCAB_SIZE, d_emb)
    w: Parameter          # (d_emb, d_emb)
    b: Parameter          # (d_emb,)
    d_emb: int

    @staticmethod
    def create(d_emb: int, rng: np.random.Generator | None = None,
               prefix: str = "encoder") -> "EncoderParams":
        rng = rng or np.random.default_rng(0)
        return EncoderParams(
            embed=Parameter(rng.normal(0, 0.1, size=(VOCAB_SIZE, d_emb)),
                            f"{prefix}.embed"),
            w=Parameter(rng.normal(0, 1.0 / np.sqrt(d_emb), size=(d_emb, d_emb)),
                        f"{prefix}.w"),
            b=Parameter(np.zeros(d_emb), f"{prefix}.b"),
            d_emb=d_emb,
        )

    def parameters(self) -> list[Parameter]:
        return [self.embed, self.w, self.b]


def encode_sequence(tokens: TokenSequence, params: EncoderParams) -> Tensor:
    """Fixed-width post vector: mean-pooled token embeddings through one
    dense layer with tanh."""
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty token sequence")
    ids = np.asarray(tokens.ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= VOCAB_SIZE:
        raise ValueError(f"unknown token id {ids.max()}")
    rows = ad.gather_rows(params.embed, ids)
    pooled = rows.mean(axis=0)
    return ad.tanh(ad.add(ad.matmul(pooled, params.w), params.b))


def write_vocabulary(path) -> None:
    """Emit the fixed token vocabulary as JSON lines of {token, id}."""
    entries = [("[CLS]", CLS_ID), ("[SEP]", SEP_ID), ("[PAD]", PAD_ID)]
    entries += [(f"byte_{i}", BYTE_BASE + i) for i in range(256)]
    entries += [("verified_true", VERIFIED_TRUE), ("verified_false", VERIFIED_FALSE)]
    entries += [(f"followers_b{i}", FOLLOWER_BASE + i) for i in range(FOLLOWER_BUCKETS)]
    entries += [(f"age_b{i}", AGE_BASE + i) for i in range(AGE_BUCKETS)]
    entries += [(f"hour_{i}", HOUR_BASE + i) for i in range(24)]
    entries += [(f"gap_b{i}", GAP_BASE + i) for i in range(GAP_BUCKETS)]
    entries += [(f"eng_b{i}", ENG_BASE + i) for i in range(ENG_BUCKETS)]
    with Path(path).open("w") as fh:
        for token, tid in entries:
            fh.write(json.dumps({"token": token, "id": tid}) + "\n")
