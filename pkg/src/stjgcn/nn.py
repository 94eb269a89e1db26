"""Parameter initializers, batch normalization state and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, batch_norm as _batch_norm, get_default_dtype


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, name=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def normal(rng: np.random.Generator, shape, std: float = 0.1, name=None) -> Tensor:
    # N(0, 0.01) read as variance 0.01
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


class BatchNorm:
    """Per-channel normalization with running statistics.

    ``reduce_axes`` are normalized over; the remaining axes form the channel
    shape, which is also the shape of the learnable scale/shift.
    """

    def __init__(self, channel_shape, reduce_axes, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.channel_shape = tuple(channel_shape)
        self.reduce_axes = tuple(reduce_axes)
        self.momentum = momentum
        self.eps = eps
        self.gamma = ones(self.channel_shape, name=f"{name}.gamma")
        self.beta = zeros(self.channel_shape, name=f"{name}.beta")
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    def _keep_shape(self, ndim: int):
        shape, it = [], iter(self.channel_shape)
        for ax in range(ndim):
            shape.append(1 if ax in self.reduce_axes else next(it))
        return tuple(shape)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        keep = self._keep_shape(x.ndim)
        gamma, beta = self.gamma.reshape(keep), self.beta.reshape(keep)
        if training:
            count = int(np.prod([x.shape[a] for a in self.reduce_axes]))
            if count < 2:
                raise ValueError("batch norm in training mode needs at least 2 values per channel")
            out, mean, var = _batch_norm(x, gamma, beta, self.reduce_axes, self.eps)
            mean, var = mean.reshape(self.channel_shape), var.reshape(self.channel_shape)
            if self.running_mean is None:
                self.running_mean, self.running_var = mean.copy(), var.copy()
            else:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mean
                self.running_var = m * self.running_var + (1 - m) * var
            return out
        if self.running_mean is None:
            raise RuntimeError("batch norm statistics are uninitialized: run at least one training step first")
        dtype = get_default_dtype()
        out, _, _ = _batch_norm(
            x, gamma, beta, self.reduce_axes, self.eps,
            self.running_mean.reshape(keep).astype(dtype, copy=False),
            self.running_var.reshape(keep).astype(dtype, copy=False),
        )
        return out

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class AdamState:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total
