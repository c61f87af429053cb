"""Model assembly: taped forward vs the row stepper, rollout semantics,
task heads, and the two-tier composition."""
import numpy as np
import pytest

from icssm.model import (ForecastSeries, ICMambaModel, ModelConfig,
                         OpinionGroup, init_rollout, rollout_steps,
                         rollout_trajectory, two_tier_forecast)

TAU_OBS = 6 * 3600.0


def _post_with_history(small_dataset):
    posts, _ = small_dataset
    return next(p for p in posts if len(p.in_window(TAU_OBS)) >= 5)


def test_forward_prediction_count(small_model, small_dataset):
    # m in-window observations -> exactly m next-step predictions
    post = _post_with_history(small_dataset)
    m = len(post.in_window(TAU_OBS))
    out = small_model.forward_post(post, TAU_OBS)
    assert out["stream"].data.shape[0] == m + 1
    assert out["pred_log"].data.shape == (m + 1, 4)  # rows 0..m-1 are scored
    for h in out["hiddens"]:
        assert h.data.shape[0] == m + 1  # hidden count == sequence length


def test_forward_runs_on_empty_window(small_model, small_dataset):
    posts, _ = small_dataset
    post = posts[0]
    out = small_model.forward_post(post, tau_obs=1.0)  # before any observation
    assert out["stream"].data.shape[0] == 1


def test_stepper_matches_taped_forward(small_model, small_dataset):
    post = _post_with_history(small_dataset)
    out = small_model.forward_post(post, TAU_OBS)
    state, final_u = init_rollout(small_model, [post], post.t0 + TAU_OBS)
    np.testing.assert_allclose(final_u[0], out["stream"].data[-1], atol=1e-10)


def test_rollout_point_count():
    # T = 28 days at 5-minute steps -> 8064 points
    K = int(np.floor(28 * 86400 / 300.0))
    assert K == 8064


def test_rollout_chunking_invariance(small_model, small_dataset):
    post = _post_with_history(small_dataset)
    whole = rollout_trajectory(small_model, post, TAU_OBS, 300.0, 4 * 3600.0)
    chunked = rollout_trajectory(small_model, post, TAU_OBS, 300.0,
                                 4 * 3600.0, chunk=5)
    assert whole.values.shape == (48, 4)
    np.testing.assert_allclose(whole.values, chunked.values, atol=1e-10)
    np.testing.assert_array_equal(whole.times, chunked.times)


def test_rollout_state_resume(small_model, small_dataset):
    # stopping and resuming mid-rollout reproduces the uninterrupted run
    post = _post_with_history(small_dataset)
    start = post.t0 + TAU_OBS
    grid = start + 300.0 * np.arange(1, 21)
    s1, _ = init_rollout(small_model, [post], start)
    full = rollout_steps(small_model, s1, grid)
    s2, _ = init_rollout(small_model, [post], start)
    first = rollout_steps(small_model, s2, grid[:8])
    snapshot = s2.copy()
    second = rollout_steps(small_model, snapshot, grid[8:])
    np.testing.assert_allclose(np.concatenate([first, second]), full,
                               atol=1e-12)


def test_rollout_values_nonnegative(small_model, small_dataset):
    post = _post_with_history(small_dataset)
    series = rollout_trajectory(small_model, post, TAU_OBS, 600.0, 3600.0)
    assert np.all(series.values >= 0)
    cum = series.cumulative(np.array([5.0, 5.0, 5.0, 5.0]))
    assert np.all(np.diff(cum, axis=0) >= -1e-12)


def test_rollout_argument_validation(small_model, small_dataset):
    post = _post_with_history(small_dataset)
    with pytest.raises(ValueError):
        rollout_trajectory(small_model, post, TAU_OBS, 0.0, 3600.0)
    with pytest.raises(ValueError):
        rollout_trajectory(small_model, post, TAU_OBS, 600.0, 100.0)


def test_predict_total_includes_observed(small_model, small_dataset):
    post = _post_with_history(small_dataset)
    total = small_model.predict_total(post, TAU_OBS)
    observed = post.cumulative_at(post.t0 + TAU_OBS)
    assert np.all(total >= observed - 1e-12)


def test_classify_returns_distribution(small_model, small_dataset):
    post = _post_with_history(small_dataset)
    probs = small_model.classify_opinion(post, TAU_OBS)
    assert probs.shape == (small_model.config.n_opinions,)
    assert np.all(probs > 0)
    assert np.isclose(probs.sum(), 1.0)


def test_two_tier_identity_at_initialization(small_model, small_dataset):
    # the correction head is zero-initialized: tier 2 starts as the exact
    # sum of tier-1 rollouts
    posts, manifest = small_dataset
    opinion = manifest.opinions[0]
    group = OpinionGroup(opinion, [p for p in posts if p.opinion == opinion])
    t_end = min(p.t0 for p in group.posts) + 2 * 86400.0
    series = two_tier_forecast(small_model, group, t_end, 600.0, 2 * 3600.0)
    visible = [p for p in group.sorted_posts() if p.t0 <= t_end]
    state, _ = init_rollout(small_model, visible, t_end,
                            next_time=series.times[0])
    plain = rollout_steps(small_model, state, series.times).sum(axis=1)
    np.testing.assert_allclose(series.values, plain, atol=1e-12)


def test_two_tier_rejects_empty_window(small_model, small_dataset):
    posts, manifest = small_dataset
    opinion = manifest.opinions[0]
    group = OpinionGroup(opinion, [p for p in posts if p.opinion == opinion])
    with pytest.raises(ValueError):
        two_tier_forecast(small_model, group,
                          min(p.t0 for p in group.posts) - 10.0, 600.0, 3600.0)


def test_ablation_flags_change_forward(small_dataset):
    posts, manifest = small_dataset
    post = next(p for p in posts if len(p.in_window(TAU_OBS)) >= 3)
    base_cfg = dict(n_opinions=3, s_ref=manifest.s_ref)
    full = ICMambaModel(ModelConfig(**base_cfg), seed=2)
    ref = full.forward_post(post, TAU_OBS)["pred_log"].data
    for flag in ("ablate_text", "ablate_user", "ablate_time"):
        ablated = ICMambaModel(ModelConfig(**base_cfg, **{flag: True}), seed=2)
        out = ablated.forward_post(post, TAU_OBS)["pred_log"].data
        assert not np.allclose(out, ref), flag


def test_strict_mode_validates_ranges():
    with pytest.raises(ValueError):
        ModelConfig(strict=True)  # defaults are far below the strict ranges
    ModelConfig(strict=True, d_emb=128, d_model=64, n_state=256, n_blocks=2,
                l_max=1024)  # within every range


def test_parameter_names_unique_and_stable(small_model):
    names = [p.name for p in small_model.parameters()]
    assert len(names) == len(set(names))
    again = [p.name for p in small_model.parameters()]
    assert names == again


def test_forecast_series_cumulative():
    series = ForecastSeries(times=np.array([1.0, 2.0]),
                            values=np.array([[1.0, 0, 0, 0],
                                             [2.0, 1.0, 0, 0]]))
    cum = series.cumulative(np.array([10.0, 0, 0, 0]))
    np.testing.assert_allclose(cum[:, 0], [11.0, 13.0])
