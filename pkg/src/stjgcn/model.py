"""Dilated causal joint-graph convolution network with multi-range attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graphs import PredefinedSTJG, SpatioTemporalEmbedding, adaptive_pairs
from .nn import BatchNorm, glorot, zeros


@dataclass
class LayerConfig:
    """Dilated causal layer schedule.

    ``dilations[m]`` is the stride at which layer ``m`` emits outputs (counted
    back from the newest step).  Layer ``m`` therefore reads its input at
    offsets that are multiples of the previous layer's stride, so the time
    gap between kernel taps of layer ``m`` is ``offsets[m]``.
    """

    P: int
    K: int
    dilations: list[int]

    def __post_init__(self):
        if self.K < 1 or not self.dilations:
            raise ValueError("need K >= 1 and at least one layer")
        offs = self.offsets
        for a, b in zip(offs, offs[1:]):
            if b % a:
                raise ValueError(f"dilations {self.dilations} are not a divisibility chain")
        if self.receptive_field < self.P:
            raise ValueError(
                f"dilations {self.dilations} with K={self.K} cover {self.receptive_field} < P={self.P} steps"
            )

    @property
    def num_layers(self) -> int:
        return len(self.dilations)

    @property
    def offsets(self) -> list[int]:
        return [1] + list(self.dilations[:-1])

    @property
    def receptive_field(self) -> int:
        return 1 + (self.K - 1) * sum(self.offsets)

    @property
    def padding(self) -> int:
        return max(0, self.receptive_field - self.P)

    @property
    def max_time_gap(self) -> int:
        return max(self.offsets) * (self.K - 1)

    def positions(self) -> list[np.ndarray]:
        """Sorted positions (in the left-padded frame) computed at each level; level 0 is the input."""
        length = self.P + self.padding
        levels = [np.array([length - 1])]
        for off in reversed(self.offsets):
            prev = levels[0]
            taps = (prev[None, :] - off * np.arange(self.K)[:, None]).ravel()
            levels.insert(0, np.unique(taps))
        if levels[0].min() < 0:
            raise ValueError("layer schedule reads before the padded window")
        return levels


def plan_dilations(P: int, K: int) -> LayerConfig:
    """Fewest layers whose receptive field reaches all ``P`` inputs.

    Strides grow by a factor of ``K`` per layer, with the last growth step
    trimmed to what the remaining history needs.
    """
    if P < 2 or K < 2:
        raise ValueError(f"need P >= 2 and K >= 2, got P={P}, K={K}")
    if P < K:
        raise ValueError(f"input length P={P} is shorter than kernel size K={K}")
    offsets = [1]
    covered = K
    while covered < P:
        rem = P - covered
        grow = min(K, math.ceil(rem / ((K - 1) * offsets[-1])))
        offsets.append(offsets[-1] * grow)
        covered += (K - 1) * offsets[-1]
    return LayerConfig(P=P, K=K, dilations=offsets[1:] + [offsets[-1]])


@dataclass
class ModelConfig:
    num_nodes: int
    in_channels: int
    P: int = 12
    Q: int = 12
    d: int = 64
    K: int = 3
    delta_adt: float = 0.5
    steps_per_day: int = 288
    dilations: list[int] = field(default_factory=list)

    def layer_config(self) -> LayerConfig:
        if self.dilations:
            return LayerConfig(self.P, self.K, list(self.dilations))
        return plan_dilations(self.P, self.K)

    def to_dict(self) -> dict:
        return asdict(self)


# -- building blocks --------------------------------------------------------
def _stack_graph(adj: np.ndarray) -> Tensor:
    K, n, _ = adj.shape
    return Tensor(adj.reshape(K, 1, n, n))


def _graph_conv(a_fw, a_bw, x, w1, w2, b, bn, training) -> Tensor:
    K, d_in, d_out = w1.shape
    h = (a_fw @ x) @ w1.reshape(K, 1, d_in, d_out) + (a_bw @ x) @ w2.reshape(K, 1, d_in, d_out) + b
    return ag.relu(bn(h, training)).sum(axis=1)


def stjgc_predefined(x: Tensor, adj_fw: np.ndarray, adj_bw: np.ndarray, w1: Tensor, w2: Tensor,
                     b: Tensor, bn: BatchNorm, training: bool) -> Tensor:
    """Sum over kernel taps k of phi(A_fw^k X_k W_k1 + A_bw^k X_k W_k2 + b).

    ``x`` is (B, K, S, N, d): tap k holds the inputs k dilated steps back.
    ``adj_*`` are (K, N, N).  Returns (B, S, N, d).
    """
    if x.shape[1] != adj_fw.shape[0] or w1.shape[0] != adj_fw.shape[0]:
        raise ag.ShapeError(f"kernel length mismatch: window {x.shape}, graphs {adj_fw.shape}, weights {w1.shape}")
    return _graph_conv(_stack_graph(adj_fw), _stack_graph(adj_bw), x, w1, w2, b, bn, training)


def stjgc_adaptive(x: Tensor, adj_fw: Tensor, adj_bw: Tensor, w1: Tensor, w2: Tensor,
                   b: Tensor, bn: BatchNorm, training: bool) -> Tensor:
    """Same as :func:`stjgc_predefined` with per-sample learned graphs (B, K, S, N, N)."""
    if x.shape[:3] != adj_fw.shape[:3] or w1.shape[0] != x.shape[1]:
        raise ag.ShapeError(f"kernel length mismatch: window {x.shape}, graphs {adj_fw.shape}, weights {w1.shape}")
    return _graph_conv(adj_fw, adj_bw, x, w1, w2, b, bn, training)


def gate_fuse(z_pdf: Tensor, z_adt: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    if z_pdf.shape != z_adt.shape:
        raise ag.ShapeError(f"branch shapes differ: {z_pdf.shape} vs {z_adt.shape}")
    gate = ag.sigmoid(ag.concat([z_pdf, z_adt], axis=-1) @ w + b)
    return gate * z_pdf + (1.0 - gate) * z_adt, gate


def multi_range_attention(ranges: Tensor, w: Tensor, b: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax-weighted sum over the range axis of ``ranges`` (B, M, N, d).

    Returns Y (B, N, d) and the weights (B, M, N).
    """
    scores = ag.tanh(ranges @ w + b) @ v  # (B, M, N, 1)
    alpha = ag.softmax(scores, axis=1)
    return (alpha * ranges).sum(axis=1), alpha.reshape(alpha.shape[:-1])


def predict_heads(y: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                  bn: BatchNorm, training: bool) -> Tensor:
    """Q independent two-layer heads on Y (B, N, d); returns (B, Q, N)."""
    B, N, d = y.shape
    Q = w1.shape[0]
    hidden = y.reshape(B, 1, N, d) @ w1 + b1.reshape(Q, 1, d)
    hidden = ag.relu(bn(hidden, training))
    out = hidden @ w2 + b2.reshape(Q, 1, 1)
    return out.reshape(B, Q, N)


@dataclass
class StackOutput:
    ranges: list[Tensor]
    hidden: list[tuple[np.ndarray, Tensor]]  # (positions in the unpadded frame, (B, S, N, d))
    gates: list[Tensor]


class STJGCN:
    def __init__(self, config: ModelConfig, graph: PredefinedSTJG, seed: int = 0):
        self.config = config
        self.layers = config.layer_config()
        if graph.kernel_size <= self.layers.max_time_gap:
            raise ValueError(
                f"pre-defined graph has {graph.kernel_size} time gaps, need {self.layers.max_time_gap + 1}"
            )
        if graph.raw.shape[1] != config.num_nodes:
            raise ValueError(f"graph has {graph.raw.shape[1]} nodes, model expects {config.num_nodes}")
        self.graph = graph
        self._positions = self.layers.positions()
        rng = np.random.default_rng(seed)
        c, d, K, Q = config, config.d, config.K, config.Q
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, BatchNorm] = {}

        self._add("input.w", glorot(rng, c.in_channels, d))
        self._add("input.b", zeros((d,)))
        self.embedding = SpatioTemporalEmbedding(c.num_nodes, d, c.steps_per_day, rng)
        for p in self.embedding.parameters():
            self._add(p.name, p)
        self._add("interaction.B", glorot(rng, d, d))
        for m in range(self.layers.num_layers):
            for branch in ("pdf", "adt"):
                pre = f"layer{m}.{branch}"
                self._add(f"{pre}.w1", glorot(rng, d, d, shape=(K, d, d)))
                self._add(f"{pre}.w2", glorot(rng, d, d, shape=(K, d, d)))
                self._add(f"{pre}.b", zeros((d,)))
                self._norm(f"{pre}.bn", BatchNorm((K, d), (0, 2, 3), name=f"{pre}.bn"))
            self._add(f"layer{m}.gate.w", glorot(rng, 2 * d, d))
            self._add(f"layer{m}.gate.b", zeros((d,)))
        self._add("attention.w", glorot(rng, d, d))
        self._add("attention.b", zeros((d,)))
        self._add("attention.v", glorot(rng, d, 1))
        self._add("head.w1", glorot(rng, d, d, shape=(Q, d, d)))
        self._add("head.b1", zeros((Q, d)))
        self._add("head.w2", glorot(rng, d, 1, shape=(Q, d, 1)))
        self._add("head.b2", zeros((Q,)))
        self._norm("head.bn", BatchNorm((Q, d), (0, 2), name="head.bn"))

    def _add(self, name: str, t: Tensor) -> None:
        t.name = name
        t.requires_grad = True
        self.params[name] = t

    def _norm(self, name: str, bn: BatchNorm) -> None:
        self.norms[name] = bn
        self._add(f"{name}.gamma", bn.gamma)
        self._add(f"{name}.beta", bn.beta)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward ------------------------------------------------------------
    def forward_stack(self, x, slot, weekday, training: bool = True) -> StackOutput:
        """Run the input projection and the dilated causal layers.

        ``x`` is (B, P, N, C) in normalized units; ``slot``/``weekday`` are
        (B, P) calendar indices for each input step.
        """
        x = ag.as_tensor(x)
        slot, weekday = np.asarray(slot), np.asarray(weekday)
        B, P, N, C = x.shape
        cfg = self.config
        if (P, N, C) != (cfg.P, cfg.num_nodes, cfg.in_channels):
            raise ag.ShapeError(
                f"input window {x.shape} does not match model (B, {cfg.P}, {cfg.num_nodes}, {cfg.in_channels})"
            )
        pad = self.layers.padding
        h = x @ self.p("input.w") + self.p("input.b")
        if pad:
            h = ag.concat([Tensor(np.zeros((B, pad, N, cfg.d))), h], axis=1)
            slot = np.concatenate([np.repeat(slot[:, :1], pad, axis=1), slot], axis=1)
            weekday = np.concatenate([np.repeat(weekday[:, :1], pad, axis=1), weekday], axis=1)
        K = cfg.K
        taps = np.arange(K)[:, None]
        B_mat = self.p("interaction.B")
        ranges, hidden, gates = [], [], []
        prev_pos = self._positions[0]
        for m, off in enumerate(self.layers.offsets):
            pos = self._positions[m + 1]
            lookup = np.searchsorted(prev_pos, pos[None, :] - off * taps)  # (K, S)
            window = ag.take(h, lookup, axis=1)  # (B, K, S, N, d)
            gaps = off * np.arange(K)
            z_pdf = stjgc_predefined(
                window, self.graph.forward[gaps], self.graph.backward[gaps],
                self.p(f"layer{m}.pdf.w1"), self.p(f"layer{m}.pdf.w2"), self.p(f"layer{m}.pdf.b"),
                self.norms[f"layer{m}.pdf.bn"], training,
            )
            src = pos[None, :] - off * taps
            l_fw, l_bw = adaptive_pairs(
                self.embedding, B_mat, cfg.delta_adt,
                slot[:, src], weekday[:, src],
                np.broadcast_to(slot[:, pos][:, None, :], (B, K, len(pos))),
                np.broadcast_to(weekday[:, pos][:, None, :], (B, K, len(pos))),
            )
            z_adt = stjgc_adaptive(
                window, l_fw, l_bw,
                self.p(f"layer{m}.adt.w1"), self.p(f"layer{m}.adt.w2"), self.p(f"layer{m}.adt.b"),
                self.norms[f"layer{m}.adt.bn"], training,
            )
            z, gate = gate_fuse(z_pdf, z_adt, self.p(f"layer{m}.gate.w"), self.p(f"layer{m}.gate.b"))
            h = z + ag.take(h, np.searchsorted(prev_pos, pos), axis=1)
            hidden.append((pos - pad, h))
            gates.append(gate)
            ranges.append(h[:, -1])
            prev_pos = pos
        return StackOutput(ranges=ranges, hidden=hidden, gates=gates)

    def forward(self, x, slot, weekday, training: bool = True, return_attention: bool = False):
        """Predictions (B, Q, N) in normalized units."""
        stack = self.forward_stack(x, slot, weekday, training)
        y, alpha = multi_range_attention(
            ag.stack(stack.ranges, axis=1), self.p("attention.w"), self.p("attention.b"), self.p("attention.v")
        )
        pred = predict_heads(
            y, self.p("head.w1"), self.p("head.b1"), self.p("head.w2"), self.p("head.b2"),
            self.norms["head.bn"], training,
        )
        return (pred, alpha) if return_attention else pred

    __call__ = forward

    # -- persistence -------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": v.data for k, v in self.params.items()}
        for name, bn in self.norms.items():
            if bn.running_mean is not None:
                arrays[f"running.{name}.mean"] = bn.running_mean
                arrays[f"running.{name}.var"] = bn.running_var
        arrays["stjg.raw"] = self.graph.raw
        arrays["stjg.forward"] = self.graph.forward
        arrays["stjg.backward"] = self.graph.backward
        return arrays

    def meta(self) -> dict:
        return {"model": self.config.to_dict(), "stjg": {"delta": self.graph.delta, "sigma": self.graph.sigma}}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            src = arrays[f"param.{k}"]
            if src.shape != t.shape:
                raise ag.ShapeError(f"checkpoint array {k} has shape {src.shape}, model expects {t.shape}")
            t.data = src.astype(t.dtype, copy=True)
        for name, bn in self.norms.items():
            if f"running.{name}.mean" in arrays:
                bn.running_mean = arrays[f"running.{name}.mean"].copy()
                bn.running_var = arrays[f"running.{name}.var"].copy()
            else:
                bn.running_mean = bn.running_var = None

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "STJGCN":
        graph = PredefinedSTJG(
            raw=arrays["stjg.raw"], forward=arrays["stjg.forward"], backward=arrays["stjg.backward"],
            delta=meta["stjg"]["delta"], sigma=meta["stjg"]["sigma"],
        )
        model = cls(ModelConfig(**meta["model"]), graph)
        model.load_arrays(arrays)
        return model

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items() if not k.startswith("stjg.")}


# -- accounting ---------------------------------------------------------------
def _group(name: str) -> str:
    head = name.split(".")[0]
    if head.startswith("layer"):
        return "stjgc." + name.split(".")[1]
    return head


def count_parameters(model: STJGCN, num_edges: int | None = None) -> dict:
    """Trainable scalar count per group plus complexity-term multiply estimates."""
    groups: dict[str, int] = {}
    for name, t in model.params.items():
        groups[_group(name)] = groups.get(_group(name), 0) + t.size
    c = model.config
    N, d, K, Q, M = c.num_nodes, c.d, c.K, c.Q, model.layers.num_layers
    E = int(np.count_nonzero(model.graph.raw[0])) if num_edges is None else num_edges
    costs = {
        "stjg_embedding": N * d * d,
        "stjg_adjacency": N * N * d,
        "stjgc_layer": K * (E * d + N * d * d),
        "stjgc_module": M * K * (E * d + N * d * d),
        "prediction": N * (M * d + Q * d * d),
    }
    return {"total": sum(groups.values()), "groups": groups, "costs": costs, "edges": E, "layers": M}
