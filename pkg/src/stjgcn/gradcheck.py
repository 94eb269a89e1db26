"""Central finite-difference verification of model gradients, per parameter group."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import generate_synthetic
from .graphs import build_predefined
from .model import ModelConfig, STJGCN
from .training import SplitSpec, combined_loss, split_windows

THRESHOLDS = {"f64": 1e-4, "f32": 1e-2}
STEP = 1e-5


@dataclass
class GroupReport:
    group: str
    max_rel_error: float
    checked: int

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold


def group_of(name: str) -> str:
    m = re.match(r"(layer\d+\.(?:pdf|adt|gate))", name)
    return m.group(1) if m else name.split(".")[0]


def _pick(grad: np.ndarray, rng: np.random.Generator, per_tensor: int) -> np.ndarray:
    flat = np.abs(grad).ravel()
    if flat.size <= 2 * per_tensor:
        return np.arange(flat.size)
    top = np.argsort(-flat, kind="stable")[:per_tensor]
    rest = rng.choice(np.setdiff1d(np.arange(flat.size), top), size=per_tensor, replace=False)
    return np.concatenate([top, rest])


def _loss(model: STJGCN, batch, stats, beta: float):
    std, mean = float(stats.std[0]), float(stats.mean[0])
    pred = model(batch.x, batch.slot, batch.weekday, training=True) * std + mean
    return combined_loss(pred, batch.y, beta)


def analytic_grads(model: STJGCN, batch, stats, beta: float = 1.0) -> dict[str, np.ndarray]:
    model.zero_grad()
    ag.backward(_loss(model, batch, stats, beta))
    return {k: p.grad.astype(np.float64) for k, p in model.params.items()}


def check_model(model: STJGCN, batch, stats, beta: float = 1.0, h: float = STEP,
                per_tensor: int = 8, seed: int = 0, grads: dict | None = None) -> list[GroupReport]:
    """Compare backprop gradients with central differences on sampled coordinates.

    The error of a group is ``max |analytic - numeric|`` over its checked
    coordinates divided by the largest gradient magnitude seen in the group.
    ``grads`` replaces the analytic gradients of ``model`` itself, e.g. those of
    a lower-precision copy.
    """
    def loss_value():
        with ag.no_grad():
            return _loss(model, batch, stats, beta).item()

    if grads is None:
        grads = analytic_grads(model, batch, stats, beta)
    rng = np.random.default_rng(seed)
    diffs: dict[str, list[float]] = {}
    scale: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, param in model.params.items():
        g = group_of(name)
        analytic = grads[name]
        flat = param.data.reshape(-1)
        for idx in _pick(analytic, rng, per_tensor):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_value()
            flat[idx] = old - h
            down = loss_value()
            flat[idx] = old
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[idx]
            diffs.setdefault(g, []).append(abs(a - numeric))
            scale[g] = max(scale.get(g, 0.0), abs(a), abs(numeric))
            counts[g] = counts.get(g, 0) + 1
    return [
        GroupReport(g, max(d) / max(scale[g], 1e-12), counts[g])
        for g, d in diffs.items()
    ]


def tiny_setup(num_nodes: int = 4, P: int = 8, d: int = 8, K: int = 2, Q: int = 3,
               batch: int = 3, seed: int = 0, delta_adt: float = -0.75):
    """A small synthetic model and batch for gradient checks.

    The default adaptive threshold masks roughly half of the scores while
    leaving every kernel tap with some unmasked rows.  A tap whose rows are all
    masked feeds a constant into batch norm, which puts the ReLU exactly on its
    kink, where central differences are meaningless.
    """
    if num_nodes > 5 or d > 8 or P > 8:
        raise ValueError("gradcheck runs on tiny models only: N <= 5, d <= 8, P <= 8")
    interval = 60
    ds, graph = generate_synthetic(num_nodes, 24 * 14, interval, seed)
    splits = split_windows(ds, P, Q, SplitSpec())
    cfg = ModelConfig(num_nodes=num_nodes, in_channels=ds.num_channels, P=P, Q=Q, d=d, K=K,
                      delta_adt=delta_adt, steps_per_day=24 * 60 // interval)
    stjg = build_predefined(graph, cfg.layer_config().max_time_gap + 1, 0.5)
    model = STJGCN(cfg, stjg, seed=seed)
    rows = np.linspace(0, len(splits.train) - 1, batch).astype(int)
    return model, splits.train.batch(rows), splits.stats


def run(num_nodes: int = 4, P: int = 8, d: int = 8, K: int = 2, precision: str = "f64",
        seed: int = 0, per_tensor: int = 8):
    """Returns (reports, threshold).

    Differences are always taken in 64-bit.  At f32 the analytic side comes from
    a single-precision copy of the same model.
    """
    if precision not in THRESHOLDS:
        raise ValueError(f"precision must be one of {sorted(THRESHOLDS)}")
    with ag.precision("f64"):
        model, batch, stats = tiny_setup(num_nodes, P, d, K, seed=seed)
    grads = None
    if precision != "f64":
        with ag.precision(precision):
            low = STJGCN.from_arrays(model.state_arrays(), model.meta())
            grads = analytic_grads(low, batch, stats)
    with ag.precision("f64"):
        reports = check_model(model, batch, stats, per_tensor=per_tensor, seed=seed, grads=grads)
    return reports, THRESHOLDS[precision]
