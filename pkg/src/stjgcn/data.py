"""Traffic dataset formats, calendar features, distance files and synthetic data."""
from __future__ import annotations

import calendar as _calendar
import csv
import io
import struct
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .graphs import DistanceGraph

BINARY_MAGIC = b"STTS1"
_HEADER = struct.Struct("<QQQqq")


class DataFormatError(ValueError):
    pass


@dataclass
class Calendar:
    """Maps absolute step indices to (time-of-day slot, day-of-week)."""

    start: datetime
    interval: int  # minutes
    length: int

    @property
    def steps_per_day(self) -> int:
        return 24 * 60 // self.interval

    def timestamp(self, index: int) -> datetime:
        return self.start + timedelta(minutes=self.interval * int(index))

    def features(self, index) -> tuple[np.ndarray, np.ndarray]:
        index = np.asarray(index, dtype=np.int64)
        if np.any((index < 0) | (index >= self.length)):
            raise IndexError(f"time index outside the dataset calendar [0, {self.length})")
        minutes = self.start.hour * 60 + self.start.minute + index * self.interval
        start_day = self.start.weekday()
        slot = (minutes % (24 * 60)) // self.interval
        weekday = (start_day + minutes // (24 * 60)) % 7
        return slot.astype(np.intp), weekday.astype(np.intp)


@dataclass
class TrafficDataset:
    readings: np.ndarray  # (T, N, C)
    start: datetime
    interval: int
    channel_names: list[str] = field(default_factory=list)
    node_ids: list[int] | None = None

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.readings.ndim != 3:
            raise DataFormatError(f"readings must be (T, N, C), got shape {self.readings.shape}")
        if not np.all(np.isfinite(self.readings)):
            raise DataFormatError("readings contain NaN or infinite values")
        if self.interval <= 0 or (24 * 60) % self.interval:
            raise DataFormatError(f"interval {self.interval} min does not divide a day")
        if self.start.second or self.start.microsecond or (self.start.hour * 60 + self.start.minute) % self.interval:
            raise DataFormatError("start timestamp is not aligned to the sampling interval")
        if not self.channel_names:
            self.channel_names = [f"ch_{c}" for c in range(self.num_channels)]

    @property
    def num_steps(self) -> int:
        return self.readings.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.readings.shape[1]

    @property
    def num_channels(self) -> int:
        return self.readings.shape[2]

    @property
    def calendar(self) -> Calendar:
        return Calendar(self.start, self.interval, self.num_steps)

    def time_features(self) -> tuple[np.ndarray, np.ndarray]:
        return self.calendar.features(np.arange(self.num_steps))


# -- dataset encodings --------------------------------------------------------
def _column_names(n: int, c: int) -> list[str]:
    return [f"node_{i}_ch_{j}" for i in range(n) for j in range(c)]


def save_csv(ds: TrafficDataset, path) -> None:
    T, N, C = ds.readings.shape
    flat = ds.readings.reshape(T, N * C)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time"] + _column_names(N, C))
    for t in range(T):
        writer.writerow([ds.calendar.timestamp(t).isoformat()] + [repr(float(v)) for v in flat[t]])
    Path(path).write_text(buf.getvalue())


def load_csv(path) -> TrafficDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if not header or header[0] != "time" or len(header) < 2:
            raise DataFormatError(f"{path}:1: header must start with 'time' followed by node_<i>_ch_<j> columns")
        pairs = []
        for name in header[1:]:
            parts = name.split("_")
            if len(parts) != 4 or parts[0] != "node" or parts[2] != "ch":
                raise DataFormatError(f"{path}:1: malformed column name {name!r}")
            try:
                pairs.append((int(parts[1]), int(parts[3])))
            except ValueError:
                raise DataFormatError(f"{path}:1: malformed column name {name!r}") from None
        N = max(p[0] for p in pairs) + 1
        C = max(p[1] for p in pairs) + 1
        if header[1:] != _column_names(N, C):
            raise DataFormatError(f"{path}:1: columns must enumerate node_i_ch_j in node-major order")
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                times.append(datetime.fromisoformat(row[0]))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(values)):
                raise DataFormatError(f"{path}:{lineno}: NaN or infinite cell")
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    interval = 5
    if len(times) > 1:
        step = times[1] - times[0]
        interval = int(step.total_seconds() // 60)
        if step.total_seconds() != interval * 60 or interval <= 0:
            raise DataFormatError(f"{path}:3: interval must be a positive whole number of minutes")
        for lineno, (a, b) in enumerate(zip(times, times[1:]), start=3):
            if b - a != step:
                raise DataFormatError(f"{path}:{lineno}: irregular time step")
    readings = np.array(rows, dtype=np.float64).reshape(len(rows), N, C)
    return TrafficDataset(readings, times[0], interval)


def save_binary(ds: TrafficDataset, path) -> None:
    T, N, C = ds.readings.shape
    start = _calendar.timegm(ds.start.timetuple())
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(_HEADER.pack(T, N, C, start, ds.interval))
        fh.write(ds.readings.astype("<f8").tobytes())


def load_binary(path) -> TrafficDataset:
    blob = Path(path).read_bytes()
    if not blob.startswith(BINARY_MAGIC):
        raise DataFormatError(f"{path}: missing {BINARY_MAGIC!r} magic")
    offset = len(BINARY_MAGIC)
    if len(blob) < offset + _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    T, N, C, start, interval = _HEADER.unpack_from(blob, offset)
    offset += _HEADER.size
    if len(blob) - offset != T * N * C * 8:
        raise DataFormatError(f"{path}: payload holds {len(blob) - offset} bytes, expected {T * N * C * 8}")
    readings = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(T, N, C).astype(np.float64)
    return TrafficDataset(readings, datetime(1970, 1, 1) + timedelta(seconds=start), int(interval))


def load_traffic(path) -> TrafficDataset:
    """Load either encoding, sniffed by the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    return load_binary(path) if head == BINARY_MAGIC else load_csv(path)


def save_traffic(ds: TrafficDataset, path) -> None:
    if str(path).endswith(".csv"):
        save_csv(ds, path)
    else:
        save_binary(ds, path)


# -- distances -----------------------------------------------------------------
def load_distances(path, num_nodes: int | None = None) -> DistanceGraph:
    edges, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "cost"]:
            raise DataFormatError(f"{path}:1: header must be 'from,to,cost'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                src, dst, cost = int(float(row[0])), int(float(row[1])), float(row[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
            if cost < 0 or not np.isfinite(cost):
                raise DataFormatError(f"{path}:{lineno}: invalid distance {row[2]}")
            if (src, dst) in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate edge ({src}, {dst})")
            if src < 0 or dst < 0 or (num_nodes is not None and max(src, dst) >= num_nodes):
                raise DataFormatError(f"{path}:{lineno}: unknown node id in ({src}, {dst})")
            seen.add((src, dst))
            edges.append((src, dst, cost))
    if not edges:
        raise DataFormatError(f"{path}: no edges; the distance standard deviation is undefined")
    if num_nodes is None:
        num_nodes = max(max(s, d) for s, d, _ in edges) + 1
    return DistanceGraph(num_nodes, edges)


def save_distances(graph: DistanceGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["from", "to", "cost"])
        for src, dst, cost in graph.edges:
            writer.writerow([src, dst, repr(float(cost))])


# -- synthetic data --------------------------------------------------------
def synthetic_graph(num_nodes: int, rng: np.random.Generator) -> DistanceGraph:
    """Bidirectional ring plus roughly N/3 random chords."""
    edges = {}
    for i in range(num_nodes):
        j = (i + 1) % num_nodes
        if i == j:
            continue
        cost = float(np.round(rng.uniform(0.3, 3.0), 3))
        edges[(i, j)] = cost
        edges[(j, i)] = float(np.round(cost * rng.uniform(0.9, 1.1), 3))
    for _ in range(max(1, num_nodes // 3)):
        i, j = (int(v) for v in rng.choice(num_nodes, size=2, replace=False))
        if (i, j) not in edges:
            cost = float(np.round(rng.uniform(2.0, 6.0), 3))
            edges[(i, j)] = cost
            edges[(j, i)] = cost
    return DistanceGraph(num_nodes, [(i, j, c) for (i, j), c in sorted(edges.items())])


def generate_synthetic(num_nodes: int, num_steps: int, interval: int = 5, seed: int = 0,
                       noise: float = 1.0, start: datetime = datetime(2018, 1, 1)):
    """Flow-like readings: a per-node daily cycle plus a graph-diffused disturbance.

    The disturbance follows ``e_t = rho * W e_{t-1} + noise * eps_t`` with
    ``W`` the row-normalized road graph, so linked sensors are correlated at
    lag 1.  ``noise=0`` leaves the pure daily cycle.
    """
    if num_nodes < 2:
        raise ValueError("synthetic data needs at least 2 nodes")
    rng = np.random.default_rng(seed)
    graph = synthetic_graph(num_nodes, rng)
    steps_per_day = 24 * 60 // interval
    base = rng.uniform(200.0, 300.0, size=num_nodes)
    amplitude = rng.uniform(80.0, 140.0, size=num_nodes)
    phase = rng.uniform(0.0, 2 * np.pi, size=num_nodes)
    t = np.arange(num_steps)[:, None]
    angle = 2 * np.pi * (t % steps_per_day) / steps_per_day + phase
    cycle = base + amplitude * np.sin(angle) + 0.25 * amplitude * np.sin(2 * angle)

    adj = np.zeros((num_nodes, num_nodes))
    for i, j, _ in graph.edges:
        adj[i, j] = 1.0
    weights = adj / adj.sum(axis=1, keepdims=True)
    rho = 0.95
    shocks = rng.normal(0.0, 1.0, size=(num_steps, num_nodes))
    disturbance = np.zeros((num_steps, num_nodes))
    state = np.zeros(num_nodes)
    for step in range(num_steps):
        state = rho * weights @ state + noise * 2.0 * shocks[step]
        disturbance[step] = state
    readings = (cycle + disturbance)[:, :, None]
    return TrafficDataset(readings, start, interval, ["flow"]), graph


def lagged_correlation(a: np.ndarray, b: np.ndarray, lag: int = 1) -> float:
    """corr(a_t, b_{t+lag})."""
    return float(np.corrcoef(a[:-lag], b[lag:])[0, 1])
