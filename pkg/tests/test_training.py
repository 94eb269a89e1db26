import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stjgcn.autograd import Tensor
from stjgcn.data import TrafficDataset, generate_synthetic
from stjgcn.graphs import build_predefined
from stjgcn.model import STJGCN, ModelConfig
from stjgcn.training import (
    SplitSpec, TrainConfig, TrainingDiverged, ZScoreStats, combined_loss, evaluate, fit_apply_zscore,
    history_csv, persistence_forecast, predict, split_windows, train, validation_loss, window_starts,
)


# -- normalization ---------------------------------------------------------------
def test_zscore_small_series():
    series = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    out, stats = fit_apply_zscore(series)
    mean = sum([1.0, 2.0, 3.0]) / 3
    std = math.sqrt(sum((v - mean) ** 2 for v in [1.0, 2.0, 3.0]) / 3)
    assert stats.mean[0] == mean and stats.std[0] == pytest.approx(std, abs=1e-15)
    np.testing.assert_allclose(out.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_zscore_round_trip_and_standard_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 3, 2))
    out, stats = fit_apply_zscore(x)
    assert np.abs(stats.inverse(out) - x).max() < 1e-12
    std_in = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
    assert np.abs(fit_apply_zscore(std_in)[0] - std_in).max() < 1e-12


def test_zscore_uses_training_prefix_only():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 2, 1))
    _, s1 = fit_apply_zscore(x, train_steps=60)
    y = x.copy()
    y[60:] = 1e3
    _, s2 = fit_apply_zscore(y, train_steps=60)
    assert s1.mean.tobytes() == s2.mean.tobytes() and s1.std.tobytes() == s2.std.tobytes()


def test_zscore_degenerate_and_empty():
    stats = ZScoreStats.fit(np.ones((4, 2, 1)))
    assert stats.std[0] == 1e-8
    with pytest.raises(ValueError):
        ZScoreStats.fit(np.ones((0, 2, 1)))


# -- windows ---------------------------------------------------------------------
def enumerate_windows(length, P, Q, fracs=(0.6, 0.2, 0.2)):
    a = math.floor(length * fracs[0])
    b = math.floor(length * (fracs[0] + fracs[1]))
    counts = [0, 0, 0]
    for s in range(length):
        e = s + P + Q  # exclusive
        for i, (lo, hi) in enumerate(((0, a), (a, b), (b, length))):
            if lo <= s and e <= hi:
                counts[i] += 1
    return counts


def test_window_count_examples():
    assert enumerate_windows(100, 12, 12) == [37, 0, 0]
    with pytest.raises(ValueError, match="val split"):
        window_starts(100, 12, 12, SplitSpec())
    starts = window_starts(200, 12, 12, SplitSpec())
    assert [len(s) for s in starts] == enumerate_windows(200, 12, 12) == [97, 17, 17]


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 400), st.integers(1, 8), st.integers(1, 8))
def test_window_enumeration_property(length, P, Q):
    expected = enumerate_windows(length, P, Q)
    if min(expected) == 0:
        with pytest.raises(ValueError):
            window_starts(length, P, Q, SplitSpec())
        return
    starts = window_starts(length, P, Q, SplitSpec())
    assert [len(s) for s in starts] == expected


def test_single_window_series():
    ds = TrafficDataset(np.arange(20.0).reshape(20, 1, 1), datetime(2018, 1, 1), 5)
    starts = window_starts(20, 2, 2, SplitSpec(0.6, 0.2, 0.2))
    assert [len(s) for s in starts] == [9, 1, 1]
    with pytest.raises(ValueError):
        window_starts(3, 2, 2, SplitSpec())
    splits = split_windows(ds, 2, 2, SplitSpec())
    # target starts right after the inputs
    x = splits.stats.inverse(splits.train.x[:, :, :, 0:1])[..., 0]
    assert np.allclose(splits.train.y[:, 0], x[:, -1] + 1)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        SplitSpec(1.0, 0.0, 0.0)


# -- loss and metrics -----------------------------------------------------------------
def test_loss_hand_example():
    loss = combined_loss(Tensor([[11.0, 18.0]]), np.array([[10.0, 20.0]]), beta=1.0)
    assert loss.item() == 11.5


def test_loss_trivial_cases():
    t = np.array([[3.0, -4.0], [5.0, 1.0]])
    assert combined_loss(Tensor(t), t, 1.0).item() == 0.0
    assert combined_loss(Tensor(t + 2.5), t, 0.0).item() == 2.5


def test_loss_all_zero_targets_warns():
    with pytest.warns(RuntimeWarning):
        loss = combined_loss(Tensor([[1.0, 2.0]]), np.zeros((1, 2)), 1.0)
    assert loss.item() == 1.5


def test_loss_masks_near_zero_targets():
    loss = combined_loss(Tensor([[1.0, 12.0]]), np.array([[0.0, 10.0]]), 1.0).item()
    assert loss == pytest.approx(1.5 + 20.0)


def test_metrics_examples():
    t = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert evaluate(t, t) == (0.0, 0.0, 0.0)
    mae, rmse, _ = evaluate(t - 0.5, t)
    assert mae == 0.5 and rmse == 0.5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.normal(size=(5, 4)) * 10, rng.normal(size=(5, 4)) * 10
    got = evaluate(pred, truth)
    ref = oracles.metrics(pred, truth)
    assert all(abs(a - b) < 1e-12 * max(1.0, abs(b)) for a, b in zip(got, ref))
    assert got[1] >= got[0]


def test_persistence_forecast():
    ds = TrafficDataset(np.arange(60.0).reshape(30, 2, 1), datetime(2018, 1, 1), 5)
    splits = split_windows(ds, 3, 2, SplitSpec())
    pers = persistence_forecast(splits.train, splits.stats, 2)
    last = splits.stats.inverse(splits.train.x)[:, -1, :, 0]
    np.testing.assert_allclose(pers[:, 0], last, atol=1e-12)
    np.testing.assert_allclose(pers[:, 1], last, atol=1e-12)


# -- training loop ----------------------------------------------------------------------
def small_setup(seed=0, d=4):
    ds, graph = generate_synthetic(3, 24 * 8, 60, seed)
    splits = split_windows(ds, 4, 2, SplitSpec())
    cfg = ModelConfig(num_nodes=3, in_channels=1, P=4, Q=2, d=d, K=2, delta_adt=-5.0, steps_per_day=24)
    stjg = build_predefined(graph, cfg.layer_config().max_time_gap + 1, 0.0)
    return STJGCN(cfg, stjg, seed=seed), splits


def test_zero_epochs_keeps_initial_params():
    model, splits = small_setup()
    before = {k: v.data.copy() for k, v in model.params.items()}
    result = train(model, splits, TrainConfig(epochs=0))
    assert result.history == [] and result.best_epoch is None
    assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())


def test_training_is_deterministic_and_selects_best():
    runs = []
    for _ in range(2):
        model, splits = small_setup()
        result = train(model, splits, TrainConfig(epochs=4, batch_size=16, lr=5e-3, seed=3))
        runs.append((history_csv(result.history), model, splits, result))
    assert runs[0][0] == runs[1][0]
    _, model, splits, result = runs[0]
    assert len(result.history) == 4
    assert result.best_val_loss == min(r.val_loss for r in result.history)
    loss, _ = validation_loss(model, splits.val, splits.stats, TrainConfig())
    assert loss == pytest.approx(result.best_val_loss, rel=1e-12)


def test_training_reduces_loss():
    model, splits = small_setup(d=8)
    result = train(model, splits, TrainConfig(epochs=20, batch_size=16, lr=5e-3, seed=0))
    losses = [r.train_loss for r in result.history]
    assert np.median(losses[-2:]) < np.median(losses[:2])


def test_divergence_reports_epoch_and_batch():
    model, splits = small_setup()
    model.params["head.b2"].data[:] = 1e308
    with np.errstate(over="ignore"), pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
        train(model, splits, TrainConfig(epochs=1))


def test_history_csv_columns():
    model, splits = small_setup()
    result = train(model, splits, TrainConfig(epochs=1, batch_size=32))
    text = history_csv(result.history)
    assert text.splitlines()[0] == "epoch,train_loss,val_loss,val_mae,val_rmse,val_mape"
    assert len(text.splitlines()) == 2


def test_predict_denormalizes():
    model, splits = small_setup()
    train(model, splits, TrainConfig(epochs=1, batch_size=32))
    pred = predict(model, splits.test, splits.stats)
    assert pred.shape == splits.test.y.shape
    assert abs(pred.mean() - splits.test.y.mean()) < 5 * splits.stats.std[0]
