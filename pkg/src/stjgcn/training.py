"""Normalization, chronological windowing, loss, metrics and the training loop."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import TrafficDataset
from .model import STJGCN
from .nn import AdamState, adam_step, clip_grad_norm

log = logging.getLogger(__name__)

MAPE_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ZScoreStats:
    mean: np.ndarray  # per channel
    std: np.ndarray

    @classmethod
    def fit(cls, readings: np.ndarray, eps: float = 1e-8) -> "ZScoreStats":
        """Population statistics per channel over all steps and nodes of ``readings`` (T, N, C)."""
        if readings.shape[0] == 0:
            raise ValueError("cannot fit normalization on an empty training split")
        mean = readings.mean(axis=(0, 1))
        std = readings.std(axis=(0, 1))
        return cls(mean, np.where(std > 0, std, eps))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScoreStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_apply_zscore(series: np.ndarray, stats: ZScoreStats | None = None, train_steps: int | None = None):
    if stats is None:
        stats = ZScoreStats.fit(series if train_steps is None else series[:train_steps])
    return stats.apply(series), stats


@dataclass
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        fracs = (self.train, self.val, self.test)
        if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fracs}")

    def boundaries(self, length: int) -> tuple[int, int]:
        a = int(np.floor(length * self.train + 1e-9))
        b = int(np.floor(length * (self.train + self.val) + 1e-9))
        return a, b


def window_starts(length: int, P: int, Q: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Start indices of every stride-1 window lying wholly inside one chronological segment."""
    if length < P + Q:
        raise ValueError(f"series of length {length} is shorter than one window (P+Q={P + Q})")
    a, b = spec.boundaries(length)
    out = []
    for name, lo, hi in (("train", 0, a), ("val", a, b), ("test", b, length)):
        if hi - lo < P + Q:
            raise ValueError(f"{name} split has {hi - lo} steps, fewer than one window (P+Q={P + Q})")
        out.append(np.arange(lo, hi - P - Q + 1))
    return tuple(out)


@dataclass
class WindowSet:
    x: np.ndarray  # (n, P, N, C) normalized
    y: np.ndarray  # (n, Q, N) target channel, original units
    slot: np.ndarray  # (n, P)
    weekday: np.ndarray  # (n, P)
    start: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.start)

    def batch(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.slot[idx], self.weekday[idx], self.start[idx])


def make_windows(ds: TrafficDataset, starts: np.ndarray, P: int, Q: int, stats: ZScoreStats,
                 target_channel: int = 0) -> WindowSet:
    norm = stats.apply(ds.readings)
    slot, weekday = ds.time_features()
    inp = starts[:, None] + np.arange(P)
    tgt = starts[:, None] + P + np.arange(Q)
    return WindowSet(
        x=norm[inp], y=ds.readings[tgt, :, target_channel],
        slot=slot[inp], weekday=weekday[inp], start=starts.copy(),
    )


@dataclass
class Splits:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: ZScoreStats


def split_windows(ds: TrafficDataset, P: int, Q: int, spec: SplitSpec, target_channel: int = 0,
                  stats: ZScoreStats | None = None) -> Splits:
    starts = window_starts(ds.num_steps, P, Q, spec)
    if stats is None:
        stats = ZScoreStats.fit(ds.readings[: spec.boundaries(ds.num_steps)[0]])
    sets = [make_windows(ds, s, P, Q, stats, target_channel) for s in starts]
    return Splits(*sets, stats=stats)


# -- loss and metrics ---------------------------------------------------------
def combined_loss(pred: Tensor, truth: np.ndarray, beta: float) -> Tensor:
    """MAE plus ``beta`` times MAPE (percent), both over all entries.

    Entries with ``|truth| < MAPE_FLOOR`` are left out of the MAPE term.
    """
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ag.ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    err = ag.tabs(pred - truth)
    loss = err.mean()
    if beta > 0:
        valid = np.abs(truth) >= MAPE_FLOOR
        if not valid.any():
            warnings.warn("all targets are zero; the MAPE term contributes nothing", RuntimeWarning)
            return loss
        weights = np.where(valid, 100.0 / np.where(valid, np.abs(truth), 1.0), 0.0) / valid.sum()
        loss = loss + beta * (err * weights).sum()
    return loss


def evaluate(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(MAE, RMSE, MAPE%) with near-zero targets excluded from MAPE."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    err = pred - truth
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    valid = np.abs(truth) >= MAPE_FLOOR
    mape = float((np.abs(err[valid]) / np.abs(truth[valid])).mean() * 100) if valid.any() else 0.0
    return mae, rmse, mape


def persistence_forecast(windows: WindowSet, stats: ZScoreStats, Q: int, target_channel: int = 0) -> np.ndarray:
    """Repeat the last observed value for every horizon."""
    last = windows.x[:, -1, :, target_channel] * stats.std[target_channel] + stats.mean[target_channel]
    return np.repeat(last[:, None, :], Q, axis=1)


def predict(model: STJGCN, windows: WindowSet, stats: ZScoreStats, target_channel: int = 0,
            batch_size: int = 256) -> np.ndarray:
    outs = []
    with ag.no_grad():
        for lo in range(0, len(windows), batch_size):
            b = windows.batch(slice(lo, lo + batch_size))
            z = model(b.x, b.slot, b.weekday, training=False).data
            outs.append(z * stats.std[target_channel] + stats.mean[target_channel])
    if not outs:
        return np.zeros((0, model.config.Q, model.config.num_nodes))
    return np.concatenate(outs).astype(np.float64)


# -- training loop --------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1.0
    seed: int = 0
    clip_norm: float = 0.0
    target_channel: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_mae", "val_rmse", "val_mape")


def history_csv(history: list[EpochRecord]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(",".join([str(r.epoch)] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def _scale(stats: ZScoreStats, ch: int) -> tuple[float, float]:
    return float(stats.std[ch]), float(stats.mean[ch])


def validation_loss(model: STJGCN, windows: WindowSet, stats: ZScoreStats, cfg: TrainConfig):
    pred = predict(model, windows, stats, cfg.target_channel)
    with ag.no_grad():
        loss = combined_loss(Tensor(pred), windows.y, cfg.beta).item()
    return loss, evaluate(pred, windows.y)


def train(model: STJGCN, splits: Splits, cfg: TrainConfig, progress=None) -> TrainResult:
    """Mini-batch Adam; keeps the parameters of the epoch with the lowest validation loss."""
    result = TrainResult()
    if cfg.epochs <= 0:
        return result
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    std, mean = _scale(splits.stats, cfg.target_channel)
    best = None
    n = len(splits.train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            b = splits.train.batch(order[lo:lo + cfg.batch_size])
            model.zero_grad()
            try:
                pred = model(b.x, b.slot, b.weekday, training=True) * std + mean
                loss = combined_loss(pred, b.y, cfg.beta)
                ag.backward(loss)
                grads = {k: t.grad for k, t in model.params.items()}
                if cfg.clip_norm > 0:
                    clip_grad_norm(grads, cfg.clip_norm)
                adam_step(model.params, grads, state)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {bi}: {exc}") from exc
            total += loss.item() * len(b)
            count += len(b)
        val_loss, (mae, rmse, mape) = validation_loss(model, splits.val, splits.stats, cfg)
        rec = EpochRecord(epoch, total / count, val_loss, mae, rmse, mape)
        result.history.append(rec)
        if best is None or val_loss < result.best_val_loss:
            result.best_epoch, result.best_val_loss = epoch, val_loss
            best = model.snapshot()
        log.info("epoch %d train %.4f val %.4f mae %.4f", epoch, rec.train_loss, val_loss, mae)
        if progress is not None:
            progress(rec)
    model.load_arrays({**best, **{k: v for k, v in model.state_arrays().items() if k.startswith("stjg.")}})
    return result
