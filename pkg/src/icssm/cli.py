"""Command-line surface.

Subcommands: simulate, split, pretrain, train, predict, evaluate,
insights.  All outputs are line-delimited JSON.  Exit codes: 0 success,
2 validation failure, 3 numeric failure.

Environment: ICSSM_SEED overrides any --seed argument; ICSSM_THREADS
caps the BLAS worker pools.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (CHANNELS, DataValidationError, eccdf_and_alpha,
                   manifest_path_for, save_posts, temporal_split,
                   validate_and_load)
from .model import ICMambaModel, ModelConfig, OpinionGroup, rollout_trajectory
from .numerics import OptimizerConfig
from .protocols import (band_coverage, dynamic_opinion_forecast,
                        early_prediction_sweep, overall_evaluation,
                        staged_next_eval, STAGE_BOUNDS)
from .simulate import SimConfig, default_sim_config, simulate_dataset
from .training import TrainConfig, finetune, pretrain

_UNIT_SECONDS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> float:
    """Integer plus unit suffix, e.g. 30s, 5m, 6h, 28d."""
    match = re.fullmatch(r"(\d+)([smhd])", text.strip())
    if not match:
        raise DataValidationError(
            f"invalid duration '{text}' (expected integer + unit s/m/h/d)")
    return int(match.group(1)) * _UNIT_SECONDS[match.group(2)]


def _apply_thread_cap() -> None:
    cap = os.environ.get("ICSSM_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _seed_override(seed: int) -> int:
    env = os.environ.get("ICSSM_SEED")
    return int(env) if env else seed


def _write_lines(path: str | None, rows: list[dict]) -> None:
    stream = sys.stdout if path in (None, "-") else open(path, "w")
    try:
        for row in rows:
            stream.write(json.dumps(row) + "\n")
    finally:
        if stream is not sys.stdout:
            stream.close()


def _load_dataset(path: str):
    posts, manifest = validate_and_load(path)
    if manifest is None:
        raise DataValidationError(f"no manifest found next to {path}")
    return posts, manifest


def _load_train_config(path: str | None) -> tuple[dict, TrainConfig]:
    """Returns (model config overrides, training config)."""
    obj = {}
    if path:
        obj = json.loads(Path(path).read_text())
    training = dict(obj.get("training", {}))
    opt = OptimizerConfig(**training.pop("optimizer", {}))
    return dict(obj.get("model", {})), TrainConfig(optimizer=opt, **training)


# -- subcommand handlers -----------------------------------------------

def cmd_simulate(args) -> int:
    config = SimConfig.load(args.config) if args.config else default_sim_config()
    posts, manifest = simulate_dataset(config, seed=_seed_override(args.seed))
    save_posts(posts, args.out)
    manifest.save(manifest_path_for(args.out))
    _write_lines(None, [{"posts": len(posts), "out": args.out,
                         "opinions": list(manifest.opinions)}])
    return 0


def cmd_split(args) -> int:
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise DataValidationError("--fractions needs three comma-separated values")
    posts, manifest = _load_dataset(getattr(args, "in"))
    splits = temporal_split(posts, fractions=fractions)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, subset in zip(("train", "val", "test"), splits):
        path = out_dir / f"{name}.jsonl"
        save_posts(subset, path)
        manifest.save(manifest_path_for(path))
        summary[name] = len(subset)
    _write_lines(None, [summary])
    return 0


def _split_dir(data: str):
    """A split directory (train/val/test.jsonl) or a single dataset file."""
    p = Path(data)
    if p.is_dir():
        train, m = _load_dataset(p / "train.jsonl")
        val, _ = _load_dataset(p / "val.jsonl")
        return train, val, m
    posts, manifest = _load_dataset(data)
    train, val, _ = temporal_split(posts)
    return train, val, manifest


def cmd_pretrain(args) -> int:
    train_posts, val_posts, manifest = _split_dir(args.data)
    overrides, tc = _load_train_config(args.config)
    tc.seed = _seed_override(tc.seed)
    overrides.setdefault("n_opinions", len(manifest.opinions))
    overrides.setdefault("opinion_labels", list(manifest.opinions))
    overrides.setdefault("s_ref", manifest.s_ref)
    model = ICMambaModel(ModelConfig(**overrides), seed=tc.seed)
    report = pretrain(model, train_posts, val_posts, tc, log_stream=sys.stdout)
    save_checkpoint(args.out, model)
    _write_lines(None, [{"best_epoch": report.best_epoch,
                         "best_val_loss": report.best_val_loss,
                         "stopped_early": report.stopped_early,
                         "out": args.out}])
    return 0


def cmd_train(args) -> int:
    model = load_checkpoint(getattr(args, "from"))
    train_posts, val_posts, _ = _split_dir(args.data)
    _, tc = _load_train_config(args.config)
    tc.seed = _seed_override(tc.seed)
    report = finetune(model, train_posts, args.task, tc,
                      freeze_encoder=args.freeze_encoder,
                      log_stream=sys.stdout)
    save_checkpoint(args.out, model)
    _write_lines(None, [{"task": args.task,
                         "final_loss": report.history[-1].train_loss,
                         "out": args.out}])
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.model)
    posts, _ = _load_dataset(args.data)
    matches = [p for p in posts if p.post_id == args.post_id]
    if not matches:
        raise DataValidationError(f"post '{args.post_id}' not found in {args.data}")
    post = matches[0]
    tau_obs = parse_duration(args.tau_obs)
    series = rollout_trajectory(model, post, tau_obs,
                                parse_duration(args.step),
                                parse_duration(args.horizon))
    base = post.cumulative_at(post.t0 + tau_obs)
    cum = series.cumulative(base)
    rows = [{"t": float(t),
             "e_hat": dict(zip(CHANNELS, series.values[k].tolist())),
             "cumulative": dict(zip(CHANNELS, cum[k].tolist()))}
            for k, t in enumerate(series.times)]
    _write_lines(args.out, rows)
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model)
    posts, manifest = _load_dataset(args.data)
    tau_obs = parse_duration(args.tau_obs)
    if args.mode == "overall":
        rows = [overall_evaluation(model, posts, tau_obs)]
    elif args.mode == "early":
        rows = early_prediction_sweep(model, posts)
    elif args.mode == "staged":
        rows = []
        for stage in ("fixed6h",) + tuple(STAGE_BOUNDS):
            try:
                rows.append(staged_next_eval(model, posts, stage))
            except ValueError as exc:
                rows.append({"stage": stage, "error": str(exc)})
    else:
        windows = tuple(int(w) for w in args.windows.split(","))
        horizon_days = parse_duration(args.horizon) / 86400.0
        step = parse_duration(args.step)
        rows = []
        for opinion in manifest.opinions:
            group = OpinionGroup(opinion,
                                 [p for p in posts if p.opinion == opinion])
            if not group.posts:
                continue
            results = dynamic_opinion_forecast(
                model, group, windows_days=windows,
                horizon_days=horizon_days, step=step)
            for w, records in results.items():
                summary = band_coverage(records, group.posts)
                rows.append({"opinion": opinion, "window_days": w,
                             "records": len(records), **summary})
    _write_lines(args.out, rows)
    return 0


def cmd_insights(args) -> int:
    posts, _ = validate_and_load(getattr(args, "in"))
    rows = []
    for c, channel in enumerate(CHANNELS):
        totals = np.array([p.cumulative_at(np.inf)[c] for p in posts])
        positive = totals[totals >= 1]
        if positive.size == 0:
            rows.append({"channel": channel, "alpha": None, "eccdf": []})
            continue
        ks, ps, alpha = eccdf_and_alpha(positive)
        rows.append({"channel": channel, "alpha": alpha,
                     "eccdf": [[float(k), float(p)] for k, p in zip(ks, ps)]})
    _write_lines(args.out, rows)
    return 0


# -- parser ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icssm",
        description="Interval-censored engagement forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", help="temporal train/val/test split")
    p.add_argument("--in", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fractions", default="0.7,0.15,0.15")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="pretrain on engagement histories")
    p.add_argument("--data", required=True,
                   help="dataset file or split directory")
    p.add_argument("--config", help="model/training config JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a task head")
    p.add_argument("--task", choices=("forecast", "classify"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--from", required=True, help="input checkpoint")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="autoregressive trajectory for a post")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--post-id", required=True)
    p.add_argument("--tau-obs", default="6h")
    p.add_argument("--horizon", default="28d")
    p.add_argument("--step", default="5m")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    p.add_argument("--mode", choices=("overall", "early", "staged", "dynamic"),
                   required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau-obs", default="6h")
    p.add_argument("--windows", default="3,7,10",
                   help="dynamic mode: window lengths in days")
    p.add_argument("--horizon", default="28d")
    p.add_argument("--step", default="5m")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("insights", help="engagement distribution statistics")
    p.add_argument("--in", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_insights)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataValidationError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
