"""Acceptance gates.  Each test carries an ``acceptance`` marker and shows up as a
PASS/FAIL line in the terminal summary (see conftest.py)."""
import time
from datetime import datetime

import numpy as np
import pytest

import oracles
from stjgcn import autograd as ag
from stjgcn import checkpoint, gradcheck
from stjgcn.autograd import Tensor
from stjgcn.data import TrafficDataset, generate_synthetic, load_binary, load_csv, save_binary, save_csv
from stjgcn.graphs import DistanceGraph, build_adaptive, build_predefined
from stjgcn.model import STJGCN, ModelConfig, count_parameters, multi_range_attention, stjgc_adaptive, stjgc_predefined
from stjgcn.graphs import PredefinedSTJG
from stjgcn.nn import BatchNorm
from stjgcn.training import (
    SplitSpec, TrainConfig, combined_loss, evaluate, history_csv, persistence_forecast, predict, split_windows, train,
)

CASES = 1000


def bn_with(K, d, gamma, beta):
    bn = BatchNorm((K, d), (0, 2, 3))
    bn.gamma.data[:] = gamma
    bn.beta.data[:] = beta
    return bn


def random_layer(rng):
    B, K, S = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    N, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    if B * S * N < 2:
        B = 2
    x = rng.normal(size=(B, K, S, N, d))
    w1, w2 = rng.normal(size=(K, d, d)), rng.normal(size=(K, d, d))
    b = rng.normal(size=d)
    gamma, beta = rng.uniform(0.5, 1.5, size=(K, d)), rng.normal(size=(K, d))
    return x, w1, w2, b, gamma, beta


@pytest.mark.acceptance("gradient check, all groups < 1e-4 at f64 (N=4, P=8, d=8, K=2), < 60 s")
def test_gradient_suite(detail):
    t0 = time.perf_counter()
    reports, threshold = gradcheck.run(4, 8, 8, 2, precision="f64")
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    detail(f"{len(reports)} groups, worst {worst.group} {worst.max_rel_error:.2e}, {elapsed:.1f} s")
    assert threshold == 1e-4
    groups = {r.group for r in reports}
    assert {"embedding", "interaction", "attention", "head"} <= groups
    assert any(g.endswith(".pdf") for g in groups) and any(g.endswith(".adt") for g in groups)
    assert any(g.endswith(".gate") for g in groups)
    assert all(r.passed(threshold) for r in reports)
    assert elapsed < 60


@pytest.mark.acceptance("oracle equivalence, 1000 cases x 5 ops (N<=5, d<=4), < 30 s")
def test_oracle_equivalence(detail):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = dict.fromkeys(("predefined", "adaptive", "attention", "metrics", "matmul"), 0.0)
    for _ in range(CASES):
        x, w1, w2, b, gamma, beta = random_layer(rng)
        B, K, S, N, d = x.shape
        afw = rng.random((K, N, N)) * (rng.random((K, N, N)) < 0.6)
        abw = rng.random((K, N, N)) * (rng.random((K, N, N)) < 0.6)
        got = stjgc_predefined(Tensor(x), afw, abw, Tensor(w1), Tensor(w2), Tensor(b), bn_with(K, d, gamma, beta), True)
        full = lambda a: np.broadcast_to(a[None, :, None], (B, K, S, N, N))  # noqa: E731
        ref = oracles.stjgc(x, full(afw), full(abw), w1, w2, b, gamma, beta)
        worst["predefined"] = max(worst["predefined"], np.abs(got.data - ref).max())

    for _ in range(CASES):
        x, w1, w2, b, gamma, beta = random_layer(rng)
        B, K, S, N, d = x.shape
        e = int(rng.integers(1, 5))
        ua, ub = rng.normal(size=(B, K, S, N, e)), rng.normal(size=(B, K, S, N, e))
        bm, delta = rng.normal(size=(e, e)), float(rng.uniform(-1.0, 0.5))
        lfw, lbw = np.zeros((B, K, S, N, N)), np.zeros((B, K, S, N, N))
        for idx in np.ndindex(B, K, S):
            lfw[idx] = oracles.adaptive_graph(ua[idx], ub[idx], bm, delta)
            lbw[idx] = oracles.adaptive_graph(ub[idx], ua[idx], bm, delta)
        tfw = build_adaptive(Tensor(ua), Tensor(ub), Tensor(bm), delta)
        tbw = build_adaptive(Tensor(ub), Tensor(ua), Tensor(bm), delta)
        got = stjgc_adaptive(Tensor(x), tfw, tbw, Tensor(w1), Tensor(w2), Tensor(b), bn_with(K, d, gamma, beta), True)
        ref = oracles.stjgc(x, lfw, lbw, w1, w2, b, gamma, beta)
        err = max(np.abs(got.data - ref).max(), np.abs(tfw.data - lfw).max())
        worst["adaptive"] = max(worst["adaptive"], err)

    for _ in range(CASES):
        B, M, N, d = (int(rng.integers(1, h)) for h in (3, 5, 6, 5))
        z = rng.normal(size=(B, M, N, d))
        w, b, v = rng.normal(size=(d, d)), rng.normal(size=d), rng.normal(size=(d, 1))
        y, alpha = multi_range_attention(Tensor(z), Tensor(w), Tensor(b), Tensor(v))
        ry, ra = oracles.attention(z, w, b, v)
        worst["attention"] = max(worst["attention"], np.abs(y.data - ry).max(), np.abs(alpha.data - ra).max())

    for _ in range(CASES):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=2))
        pred, truth = rng.normal(size=shape) * 50, rng.normal(size=shape) * 50
        got, ref = evaluate(pred, truth), oracles.metrics(pred, truth)
        worst["metrics"] = max(worst["metrics"], max(abs(a - r) / max(1.0, abs(r)) for a, r in zip(got, ref)))

    for _ in range(CASES):
        n, k, m = (int(s) for s in rng.integers(1, 6, size=3))
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        worst["matmul"] = max(worst["matmul"], np.abs((Tensor(a) @ Tensor(b)).data - oracles.matmul(a, b)).max())

    elapsed = time.perf_counter() - t0
    detail(", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s")
    for key in ("predefined", "adaptive", "attention"):
        assert worst[key] < 1e-10
    assert worst["metrics"] < 1e-12 and worst["matmul"] < 1e-12
    assert elapsed < 30


@pytest.mark.acceptance("normalization invariants (adaptive rows, attention weights, k=0 kernel)")
def test_normalization_invariants(detail):
    rng = np.random.default_rng(7)
    worst_row = worst_alpha = 0.0
    for _ in range(500):
        n, e = int(rng.integers(1, 8)), int(rng.integers(1, 5))
        out = build_adaptive(Tensor(rng.normal(size=(n, e))), Tensor(rng.normal(size=(n, e))),
                             Tensor(rng.normal(size=(e, e))), float(rng.uniform(-2, 1))).data
        sums = out.sum(axis=1)
        live = sums != 0
        assert np.all(out[~live] == 0)
        if live.any():
            worst_row = max(worst_row, np.abs(sums[live] - 1).max())
        m, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        _, alpha = multi_range_attention(Tensor(rng.normal(size=(2, m, n, d))), Tensor(rng.normal(size=(d, d))),
                                         Tensor(rng.normal(size=d)), Tensor(rng.normal(size=(d, 1))))
        worst_alpha = max(worst_alpha, np.abs(alpha.data.sum(axis=1) - 1).max())

    g = DistanceGraph(5, [(0, 1, 1.2), (1, 2, 0.4), (2, 3, 3.1), (3, 4, 0.9), (4, 0, 2.2), (2, 0, 1.7)])
    stjg = build_predefined(g, K=4, delta_pdf=0.3)
    plain = np.eye(5)
    for i, j, c in g.edges:
        w = np.exp(-(c**2) / g.sigma**2)
        plain[i, j] = w if w >= 0.3 else 0.0
    detail(f"row sums {worst_row:.1e}, attention sums {worst_alpha:.1e}")
    assert worst_row <= 1e-9 and worst_alpha <= 1e-9
    assert np.array_equal(stjg.raw[0], plain)


@pytest.mark.acceptance("causality, 100 trials, dilations {2,4,4,4}, K=2, strict")
def test_causality(detail):
    rng = np.random.default_rng(11)
    cfg = ModelConfig(num_nodes=3, in_channels=1, P=12, Q=3, d=4, K=2, delta_adt=-5.0, steps_per_day=24,
                      dilations=[2, 4, 4, 4])
    g = DistanceGraph(3, [(0, 1, 1.0), (1, 2, 0.6), (2, 0, 1.4), (1, 0, 0.9)])
    model = STJGCN(cfg, build_predefined(g, cfg.layer_config().max_time_gap + 1, 0.0), seed=2)
    x = rng.normal(size=(4, 12, 3, 1))
    t = rng.integers(0, 500, size=4)[:, None] + np.arange(12)
    slot, dow = t % 24, (t // 24) % 7
    model(x, slot, dow, training=True)  # initialise running statistics
    checked = 0
    with ag.strict(), ag.no_grad():
        base = model.forward_stack(x, slot, dow, training=False)
        for _ in range(100):
            p = int(rng.integers(0, 12))
            x2 = x.copy()
            x2[:, p] += rng.normal(size=x2[:, p].shape)
            pert = model.forward_stack(x2, slot, dow, training=False)
            for (pos, h1), (_, h2) in zip(base.hidden, pert.hidden):
                before = pos < p
                assert h1.data[:, before].tobytes() == h2.data[:, before].tobytes()
                checked += int(before.sum())
    detail(f"{checked} earlier hidden positions compared bitwise")


@pytest.mark.acceptance("synthetic convergence (N=10, T=2016, seed=1, d=16, 200 epochs, f32, < 10 min)")
def test_synthetic_convergence(detail):
    ds, graph = generate_synthetic(10, 2016, 5, seed=1)
    t0 = time.perf_counter()
    with ag.precision("f32"):
        splits = split_windows(ds, 12, 12, SplitSpec())
        cfg = ModelConfig(num_nodes=10, in_channels=1, P=12, Q=12, d=16, K=3, delta_adt=0.5, steps_per_day=288)
        stjg = build_predefined(graph, cfg.layer_config().max_time_gap + 1, 0.5)
        model = STJGCN(cfg, stjg, seed=1)
        train(model, splits, TrainConfig(epochs=200, seed=1))
        train_mae = evaluate(predict(model, splits.train, splits.stats), splits.train.y)[0]
        test_mae = evaluate(predict(model, splits.test, splits.stats), splits.test.y)[0]
    elapsed = time.perf_counter() - t0
    std = float(ds.readings[:, :, 0].std())
    persist = evaluate(persistence_forecast(splits.test, splits.stats, 12), splits.test.y)[0]
    detail(f"train MAE {train_mae:.3f} vs 10% std {0.1 * std:.3f}; test MAE {test_mae:.3f} "
           f"vs 0.8 x persistence {0.8 * persist:.3f}; {elapsed:.0f} s")
    assert train_mae < 0.1 * std
    assert test_mae <= 0.8 * persist
    assert elapsed < 600


@pytest.mark.acceptance("parameter count within 25% of 0.31M (PeMSD4 configuration)")
def test_parameter_count(detail):
    cfg = ModelConfig(num_nodes=307, in_channels=3, P=12, Q=12, d=64, K=3)
    kp = cfg.layer_config().max_time_gap + 1
    eye = np.broadcast_to(np.eye(307), (kp, 307, 307)).copy()
    total = count_parameters(STJGCN(cfg, PredefinedSTJG(eye, eye, eye, 0.5, 1.0)))["total"]
    detail(f"{total} parameters ({(total / 0.31e6 - 1) * 100:+.1f}%)")
    assert abs(total - 0.31e6) <= 0.25 * 0.31e6


@pytest.mark.acceptance("loss identity: truth [10,20], pred [11,18], beta 1 -> 11.5")
def test_loss_identity(detail):
    value = combined_loss(Tensor([[11.0, 18.0]]), np.array([[10.0, 20.0]]), beta=1.0).item()
    detail(repr(value))
    assert value == 11.5


def strict_run(seed):
    ds, graph = generate_synthetic(4, 24 * 20, 60, seed=5)
    splits = split_windows(ds, 6, 3, SplitSpec())
    cfg = ModelConfig(num_nodes=4, in_channels=1, P=6, Q=3, d=8, K=2, delta_adt=0.0, steps_per_day=24)
    model = STJGCN(cfg, build_predefined(graph, cfg.layer_config().max_time_gap + 1, 0.5), seed=seed)
    with ag.strict():
        result = train(model, splits, TrainConfig(epochs=3, batch_size=16, seed=seed))
    return history_csv(result.history).encode(), checkpoint.encode(model.state_arrays(), model.meta())


@pytest.mark.acceptance("determinism: strict runs give identical history and checkpoint bytes")
def test_determinism(detail):
    h1, c1 = strict_run(9)
    h2, c2 = strict_run(9)
    detail(f"history {len(h1)} B, checkpoint {len(c1)} B")
    assert h1 == h2 and c1 == c2


@pytest.mark.acceptance("round trip: dataset (csv, binary) and checkpoint bytes")
def test_round_trip(tmp_path, detail):
    rng = np.random.default_rng(3)
    ds = TrafficDataset(rng.normal(50, 10, size=(40, 3, 2)), datetime(2018, 7, 1), 5)
    save_csv(ds, tmp_path / "a.csv")
    save_csv(load_csv(tmp_path / "a.csv"), tmp_path / "b.csv")
    save_binary(ds, tmp_path / "a.stts")
    save_binary(load_binary(tmp_path / "a.stts"), tmp_path / "b.stts")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.stts").read_bytes() == (tmp_path / "b.stts").read_bytes()
    assert load_csv(tmp_path / "a.csv").readings.tobytes() == ds.readings.tobytes()

    _, blob = strict_run(1)
    arrays, meta = checkpoint.decode(blob)
    assert checkpoint.encode(arrays, meta) == blob
    model = STJGCN.from_arrays(arrays, meta)
    assert checkpoint.encode(model.state_arrays(), model.meta()) == blob
    detail("csv, binary and checkpoint re-encodings identical")
