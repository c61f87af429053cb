"""Loss identities (Eq. 1/Eq. 2 behavior), the combined objective, the
teacher-forcing schedule, and training-loop mechanics."""
import io
import json

import numpy as np
import pytest

from icssm.autodiff import Tensor
from icssm.model import ICMambaModel, ModelConfig
from icssm.numerics import OptimizerConfig
from icssm.training import (TrainConfig, evaluate_loss, finetune, loss_pred,
                            loss_temp, loss_temp_oracle, pretrain,
                            teacher_forcing_prob, total_loss)

TAU_OBS = 6 * 3600.0


def _train_config(epochs=3, **kw):
    return TrainConfig(epochs=epochs, batch_size=8,
                       optimizer=OptimizerConfig(lr=3e-3, warmup_steps=5),
                       **kw)


def test_loss_pred_zero_on_perfect_predictions(rng):
    targets = np.abs(rng.normal(3, 2, size=(5, 4)))
    pred = Tensor(np.vstack([np.log1p(targets), np.zeros((1, 4))]))
    assert float(loss_pred(pred, targets).data) == 0.0


def test_loss_pred_requires_targets():
    with pytest.raises(ValueError):
        loss_pred(Tensor(np.zeros((1, 4))), np.zeros((0, 4)))


def test_loss_temp_zero_on_consistent_states(rng):
    # build states that follow the free evolution exactly
    D, N, L = 3, 2, 6
    a = -np.abs(rng.normal(size=(D, N))) - 0.1
    gaps = np.abs(rng.normal(size=L - 1)) * 900
    s_ref = 3600.0
    h = np.empty((L, D, N))
    h[0] = rng.normal(size=(D, N))
    for j in range(L - 1):
        h[j + 1] = np.exp(gaps[j] / s_ref * a) * h[j]
    val = float(loss_temp(Tensor(h), gaps, Tensor(a), s_ref).data)
    assert val < 1e-24


def test_loss_temp_matches_loop_oracle(rng):
    D, N, L = 4, 3, 7
    a = -np.abs(rng.normal(size=(D, N)))
    h = rng.normal(size=(L, D, N))
    gaps = np.abs(rng.normal(size=L - 1)) * 1800
    fast = float(loss_temp(Tensor(h), gaps, Tensor(a), 3600.0).data)
    slow = loss_temp_oracle(h, gaps, a, 3600.0)
    assert abs(fast - slow) < 1e-12


def test_loss_temp_edge_cases(rng):
    a = Tensor(-np.ones((2, 2)))
    assert float(loss_temp(Tensor(np.zeros((1, 2, 2))), np.zeros(0), a,
                           1.0).data) == 0.0
    with pytest.raises(ValueError):
        loss_temp(Tensor(np.zeros((3, 2, 2))), np.zeros(1), a, 1.0)


def test_total_loss_identity(rng):
    for _ in range(20):
        lp = Tensor(abs(rng.normal()))
        lt = Tensor(abs(rng.normal()))
        lam = abs(rng.normal())
        combined = float(total_loss(lp, lt, lam).data)
        assert abs(combined - (float(lp.data) + lam * float(lt.data))) < 1e-12


def test_teacher_forcing_schedule():
    assert teacher_forcing_prob(0, 10) == 1.0
    assert teacher_forcing_prob(9, 10) == 0.5
    mid = teacher_forcing_prob(4, 9)
    assert 0.5 < mid < 1.0
    assert teacher_forcing_prob(0, 1) == 0.5


def _model_for(manifest):
    return ICMambaModel(ModelConfig(n_opinions=len(manifest.opinions),
                                    opinion_labels=list(manifest.opinions),
                                    s_ref=manifest.s_ref), seed=4)


def test_pretrain_reduces_loss_and_logs(small_dataset):
    posts, manifest = small_dataset
    model = _model_for(manifest)
    log = io.StringIO()
    report = pretrain(model, posts[:18], posts[18:], _train_config(4),
                      log_stream=log)
    lines = [json.loads(l) for l in log.getvalue().splitlines()]
    assert len(lines) == len(report.history)
    assert lines[-1]["train_loss"] < lines[0]["train_loss"]
    assert {"epoch", "train_loss", "train_pred", "train_temp", "val_loss",
            "p_tf", "seconds"} <= set(lines[0])


def test_pretrain_deterministic(small_dataset):
    posts, manifest = small_dataset
    runs = []
    for _ in range(2):
        model = _model_for(manifest)
        pretrain(model, posts[:12], posts[12:16], _train_config(2, seed=7))
        runs.append({p.name: p.data.copy() for p in model.parameters()})
    for name in runs[0]:
        np.testing.assert_array_equal(runs[0][name], runs[1][name])


def test_pretrain_restores_best_parameters(small_dataset):
    posts, manifest = small_dataset
    model = _model_for(manifest)
    # huge lr after warmup forces divergence; best epoch must win
    cfg = TrainConfig(epochs=5, batch_size=32, patience=10,
                      optimizer=OptimizerConfig(lr=5.0, warmup_steps=1))
    report = pretrain(model, posts[:12], posts[12:16], cfg)
    val = evaluate_loss(model, posts[12:16], cfg)
    assert np.isclose(val, report.best_val_loss, rtol=1e-6)


def test_pretrain_early_stopping(small_dataset):
    posts, manifest = small_dataset
    model = _model_for(manifest)
    cfg = TrainConfig(epochs=50, batch_size=32, patience=1,
                      optimizer=OptimizerConfig(lr=5.0, warmup_steps=1))
    report = pretrain(model, posts[:12], posts[12:16], cfg)
    assert report.stopped_early
    assert len(report.history) < 50


def test_pretrain_requires_usable_posts(small_dataset):
    _, manifest = small_dataset
    model = _model_for(manifest)
    with pytest.raises(ValueError):
        pretrain(model, [], [], _train_config())


def test_finetune_classify_improves(small_dataset):
    posts, manifest = small_dataset
    model = _model_for(manifest)
    report = finetune(model, posts, "classify", _train_config(4))
    assert report.history[-1].train_loss < report.history[0].train_loss


def test_finetune_frozen_encoder(small_dataset):
    posts, manifest = small_dataset
    model = _model_for(manifest)
    before = {p.name: p.data.copy() for p in model.encoder.parameters()}
    finetune(model, posts[:10], "forecast", _train_config(1),
             freeze_encoder=True)
    for p in model.encoder.parameters():
        np.testing.assert_array_equal(p.data, before[p.name])
        assert p.requires_grad  # restored afterwards


def test_finetune_rejects_unknown_task(small_dataset):
    posts, manifest = small_dataset
    with pytest.raises(ValueError):
        finetune(_model_for(manifest), posts, "rank", _train_config(1))
