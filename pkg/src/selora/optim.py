"""Optimizers that update trainable parameters in place and ignore frozen ones."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import Parameter


def _fit(state: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # grow moment buffers after an expansion; old entries keep their values
    if state.shape == shape:
        return state
    out = np.zeros(shape)
    r, c = min(state.shape[0], shape[0]), min(state.shape[1], shape[1])
    out[:r, :c] = state[:r, :c]
    return out


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: Iterable[Parameter], config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def add_params(self, params: Iterable[Parameter]) -> None:
        self.params.extend(params)

    def step(self) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p in self.params:
            if not p.trainable:
                continue
            key = id(p)
            m = _fit(self.m.get(key, np.zeros(p.shape)), p.shape)
            v = _fit(self.v.get(key, np.zeros(p.shape)), p.shape)
            g = p.grad
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * (g * g)
            self.m[key], self.v[key] = m, v
            p.value = p.value - c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def add_params(self, params: Iterable[Parameter]) -> None:
        self.params.extend(params)

    def step(self) -> None:
        for p in self.params:
            if p.trainable:
                p.value = p.value - self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
