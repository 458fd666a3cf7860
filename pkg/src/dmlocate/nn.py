"""Layers and optimizers for the two small trainable networks.

No graph autodiff: each layer caches what its backward pass needs, and the
nets wire backward calls in reverse order by hand. Parameters and gradients
live in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops


@dataclass
class Param:
    name: str
    value: np.ndarray
    dtype: np.dtype = np.dtype(np.float32)
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.ascontiguousarray(self.value, dtype=self.dtype)
        self.grad = np.zeros_like(self.value)


class Conv2dLayer:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, name: str = "conv", dtype=np.float32):
        std = np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Param(f"{name}_w", rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)),
                            np.dtype(dtype))
        self.bias = Param(f"{name}_b", np.zeros(out_ch), np.dtype(dtype))
        self.stride = stride
        self.padding = padding
        self._pair: ops.GradPair | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pair = ops.conv2d(x, self.weight.value, self.bias.value,
                                self.stride, self.padding)
        return self._pair.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        dx, dw, db = self._pair.grad(g)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


class ReLULayer:
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, g: np.ndarray) -> np.ndarray:
        return np.where(self._mask, g, np.zeros((), dtype=g.dtype))

    def params(self) -> list[Param]:
        return []


class LinearLayer:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 name: str = "fc", zero_init: bool = False, dtype=np.float32):
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            std = np.sqrt(2.0 / in_features)
            w = rng.normal(0.0, std, (out_features, in_features))
        self.weight = Param(f"{name}_w", w, np.dtype(dtype))
        self.bias = Param(f"{name}_b", np.zeros(out_features), np.dtype(dtype))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        self.weight.grad += g.T @ self._x
        self.bias.grad += g.sum(axis=0)
        return g @ self.weight.value

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


class SGD:
    """Plain gradient descent, momentum 0."""

    def __init__(self, params: list[Param], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.value -= np.float32(self.lr) * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


class Adam:
    def __init__(self, params: list[Param], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in params]
        self._v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= np.float32(self.lr) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0
