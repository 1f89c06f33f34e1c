"""Momentum SGD, Adam and Gaussian weight initialisation.

Optimizers hold a name -> Tensor mapping so their state can be written to
and restored from checkpoints by parameter name.
"""
from __future__ import annotations

from typing import Dict, Mapping, Optional

import numpy as np

from .errors import UsageError
from .tensor import Tensor


def init_gaussian(params: Mapping[str, Tensor], std: float = 0.01, seed: int = 0,
                  stds: Optional[Mapping[str, float]] = None) -> None:
    """Draw weights from N(0, std^2) in name order; biases (``*.bias``) are set to 0.

    ``stds`` overrides the deviation for individual parameter names.
    """
    rng = np.random.default_rng(seed)
    for name in sorted(params):
        t = params[name]
        if name.endswith("bias"):
            t.data[...] = 0
        else:
            s = std if stds is None else stds.get(name, std)
            t.data[...] = rng.normal(0.0, s, size=t.shape).astype(t.dtype)
        t.zero_grad()


def _grads(params: Mapping[str, Tensor]):
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient; run backward() first")
        yield name, p, p.grad


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    """

    kind = "sgd"

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.001, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = 0

    def step(self) -> None:
        for name, p, g in _grads(self.params):
            dt = p.dtype
            v = self.velocity[name]
            v *= dt.type(self.momentum)
            if self.weight_decay:
                v += g + dt.type(self.weight_decay) * p.data
            else:
                v += g
            p.data -= dt.type(self.lr) * v
        self.steps += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {f"velocity/{n}": v for n, v in self.velocity.items()}

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], steps: int) -> None:
        for n in self.velocity:
            self.velocity[n][...] = tensors[f"velocity/{n}"]
        self.steps = steps


class Adam:
    """Bias-corrected Adam."""

    kind = "adam"

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = 0

    def step(self) -> None:
        grads = list(_grads(self.params))
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p, g in grads:
            dt = p.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * g * g
            p.data -= (dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"m/{n}": a for n, a in self.m.items()}
        out.update({f"v/{n}": a for n, a in self.v.items()})
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], steps: int) -> None:
        for n in self.m:
            self.m[n][...] = tensors[f"m/{n}"]
            self.v[n][...] = tensors[f"v/{n}"]
        self.steps = steps
