"""Pre-defined and adaptive spatio-temporal joint graphs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import glorot, normal, zeros


@dataclass
class DistanceGraph:
    num_nodes: int
    edges: list[tuple[int, int, float]]
    sigma: float = field(init=False)
    degenerate: bool = field(init=False)

    def __post_init__(self):
        if not self.edges:
            raise ValueError("distance graph has no edges; sigma is undefined")
        for src, dst, cost in self.edges:
            if not (0 <= src < self.num_nodes and 0 <= dst < self.num_nodes):
                raise ValueError(f"edge ({src}, {dst}) references a node outside [0, {self.num_nodes})")
            if cost < 0 or not np.isfinite(cost):
                raise ValueError(f"edge ({src}, {dst}) has invalid distance {cost}")
        costs = np.array([c for _, _, c in self.edges], dtype=np.float64)
        self.sigma = float(costs.std())
        self.degenerate = bool(np.all(costs == costs[0]))

    def distance_matrix(self) -> np.ndarray:
        """Dense N x N distances; ``inf`` where no edge, 0 on the diagonal."""
        dist = np.full((self.num_nodes, self.num_nodes), np.inf)
        for src, dst, cost in self.edges:
            dist[src, dst] = cost
        np.fill_diagonal(dist, 0.0)
        return dist


def gaussian_kernel(dist: np.ndarray, sigma: float, k: int = 0) -> np.ndarray:
    """exp(-((k+1) * dist)^2 / sigma^2), with infinite distance mapping to 0."""
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(-(((k + 1) * dist) ** 2) / sigma**2)
    return np.where(np.isinf(dist), 0.0, w)


def normalize_directed(adj: np.ndarray, direction: str = "forward") -> np.ndarray:
    """D^-1/2 A D^-1/2 using out-degree (forward) or D^-1/2 A^T D^-1/2 with in-degree (backward).

    Zero degrees are replaced by 1, so isolated rows/columns stay zero.
    """
    adj = np.asarray(adj, dtype=np.float64)
    if np.any(adj < 0):
        raise ValueError("adjacency has negative entries")
    if direction == "forward":
        deg, mat = adj.sum(axis=1), adj
    elif direction == "backward":
        deg, mat = adj.sum(axis=0), adj.T
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    deg = np.where(deg > 0, deg, 1.0)
    scale = 1.0 / np.sqrt(deg)
    return scale[:, None] * mat * scale[None, :]


@dataclass
class PredefinedSTJG:
    """Thresholded A^(k) for k = 0..K-1 plus their two normalizations."""

    raw: np.ndarray  # (K, N, N)
    forward: np.ndarray
    backward: np.ndarray
    delta: float
    sigma: float

    @property
    def kernel_size(self) -> int:
        return self.raw.shape[0]

    def edge_counts(self) -> list[int]:
        return [int(np.count_nonzero(a)) for a in self.raw]


def build_predefined(graph: DistanceGraph, K: int, delta_pdf: float, sigma: float | None = None) -> PredefinedSTJG:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not 0.0 <= delta_pdf <= 1.0:
        raise ValueError(f"delta_pdf must lie in [0, 1], got {delta_pdf}")
    if sigma is None:
        if graph.degenerate or graph.sigma == 0:
            raise ValueError("all distances are equal so their standard deviation is 0; pass an explicit sigma")
        sigma = graph.sigma
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dist = graph.distance_matrix()
    raw = np.stack([gaussian_kernel(dist, sigma, k) for k in range(K)])
    raw = np.where(raw >= delta_pdf, raw, 0.0)
    fw = np.stack([normalize_directed(a, "forward") for a in raw])
    bw = np.stack([normalize_directed(a, "backward") for a in raw])
    return PredefinedSTJG(raw=raw, forward=fw, backward=bw, delta=delta_pdf, sigma=sigma)


class SpatioTemporalEmbedding:
    """U_t = spatial projection + time-of-day projection + day-of-week projection.

    The one-hot projections are stored as lookup tables (one row per slot),
    which is the same linear map as multiplying a one-hot vector.
    """

    def __init__(self, num_nodes: int, d: int, steps_per_day: int, rng: np.random.Generator, d_e: int | None = None):
        d_e = d if d_e is None else d_e
        self.num_nodes, self.d, self.steps_per_day = num_nodes, d, steps_per_day
        self.spatial = normal(rng, (num_nodes, d_e), name="embedding.spatial")
        self.spatial_w = glorot(rng, d_e, d, name="embedding.spatial_w")
        self.spatial_b = zeros((d,), name="embedding.spatial_b")
        self.tod_w = glorot(rng, steps_per_day, d, name="embedding.tod_w")
        self.tod_b = zeros((d,), name="embedding.tod_b")
        self.dow_w = glorot(rng, 7, d, name="embedding.dow_w")
        self.dow_b = zeros((d,), name="embedding.dow_b")

    def parameters(self) -> list[Tensor]:
        return [self.spatial, self.spatial_w, self.spatial_b, self.tod_w, self.tod_b, self.dow_w, self.dow_b]

    def __call__(self, slot, weekday) -> Tensor:
        """Embeddings for arrays of (slot, weekday); output shape ``slot.shape + (N, d)``."""
        slot = np.asarray(slot, dtype=np.intp)
        weekday = np.asarray(weekday, dtype=np.intp)
        if np.any((slot < 0) | (slot >= self.steps_per_day)):
            raise ValueError(f"time-of-day slot outside [0, {self.steps_per_day})")
        if np.any((weekday < 0) | (weekday >= 7)):
            raise ValueError("day-of-week outside [0, 7)")
        space = self.spatial @ self.spatial_w + self.spatial_b  # (N, d)
        tod = ag.take(self.tod_w, slot) + self.tod_b
        dow = ag.take(self.dow_w, weekday) + self.dow_b
        temporal = (tod + dow).reshape(slot.shape + (1, self.d))
        return temporal + space


def embed(time_index, calendar, emb: SpatioTemporalEmbedding) -> Tensor:
    """U_t for absolute time indices resolved through ``calendar``."""
    slot, weekday = calendar.features(time_index)
    return emb(slot, weekday)


def build_adaptive(u_a: Tensor, u_b: Tensor, B: Tensor, delta_adt: float) -> Tensor:
    """Row-wise masked softmax of U_a B U_b^T, dropping scores below ``delta_adt``.

    Works on stacked inputs: ``u_a``/``u_b`` of shape (..., N, d).
    """
    u_a, u_b = ag.as_tensor(u_a), ag.as_tensor(u_b)
    if u_a.shape[-1] != B.shape[0] or u_b.shape[-1] != B.shape[1]:
        raise ag.ShapeError(f"embedding/interaction shapes disagree: {u_a.shape}, {B.shape}, {u_b.shape}")
    scores = (u_a @ B) @ u_b.swapaxes(-1, -2)
    return ag.masked_softmax(scores, scores.data >= delta_adt, axis=-1)


def adaptive_pairs(emb: SpatioTemporalEmbedding, B: Tensor, delta_adt: float,
                   slot_a, dow_a, slot_b, dow_b) -> tuple[Tensor, Tensor]:
    """L_{a;b} and L_{b;a} for arrays of time pairs, computed once per distinct pair.

    Inputs are equally shaped integer arrays; outputs have shape
    ``slot_a.shape + (N, N)``.
    """
    shape = np.shape(slot_a)
    keys = np.stack([np.ravel(slot_a), np.ravel(dow_a), np.ravel(slot_b), np.ravel(dow_b)], axis=1)
    pairs, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(shape)
    feats = np.concatenate([pairs[:, :2], pairs[:, 2:]])
    uniq, which = np.unique(feats, axis=0, return_inverse=True)
    which = which.reshape(-1)
    u = emb(uniq[:, 0], uniq[:, 1])  # (n_unique, N, d)
    n = len(pairs)
    u_a = ag.take(u, which[:n])
    u_b = ag.take(u, which[n:])
    fw = build_adaptive(u_a, u_b, B, delta_adt)
    bw = build_adaptive(u_b, u_a, B, delta_adt)
    return ag.take(fw, inverse), ag.take(bw, inverse)
