"""Small fully-connected networks with analytic backprop and Adam, in numpy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mlp:
    sizes: tuple[int, ...]
    params: list[np.ndarray]  # [W1, b1, W2, b2, ...], W has shape (fan_in, fan_out)

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, out_scale: float = 1.0) -> "Mlp":
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(1.0 / fan_in)
            if i == len(sizes) - 2:
                scale *= out_scale
            params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return cls(tuple(int(s) for s in sizes), params)

    @property
    def num_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns output and the per-layer inputs needed by backward."""
        acts = [x]
        h = x
        for i in range(self.num_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.num_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        grads = [np.empty(0)] * len(self.params)
        g = grad_out
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads


@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place descent step on params."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
