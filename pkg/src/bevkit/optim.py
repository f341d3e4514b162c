"""Adam with bias correction over named parameters."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .tensor import Parameter


class Adam:
    """Standard Adam. Parameters update in lexicographic name order and their
    gradients are zeroed after each step; a parameter with no gradient is
    treated as having zero gradient."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = sorted(params, key=lambda p: p.name)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.tensor.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.tensor.grad = None

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Optimizer state as flat named arrays (for checkpointing)."""
        out = {"opt.step": np.array([float(self.t)])}
        for p in self.params:
            out[f"opt.m.{p.name}"] = self.m[p.name]
            out[f"opt.v.{p.name}"] = self.v[p.name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        self.t = int(arrays["opt.step"][0])
        for p in self.params:
            self.m[p.name] = arrays[f"opt.m.{p.name}"].reshape(p.data.shape).copy()
            self.v[p.name] = arrays[f"opt.v.{p.name}"].reshape(p.data.shape).copy()


def adam_step(opt: Adam):
    """One optimizer step (alias kept for symmetry with the op suite)."""
    opt.step()
