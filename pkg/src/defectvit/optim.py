"""Adam optimiser for :class:`~defectvit.tensor.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Gradients are zeroed after each step. A parameter without a gradient is a
    contract violation and raises rather than being silently skipped.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = OptState()
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"parameters without gradient: {', '.join(missing[:5])}")
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def sgd_adam_step(params: dict[str, Tensor], lr: float, betas: tuple[float, float],
                  eps: float, state: OptState) -> None:
    """Functional form: one Adam update of ``params`` against an explicit state."""
    opt = Adam.__new__(Adam)
    opt.params, opt.lr, opt.betas, opt.eps, opt.state = params, lr, betas, eps, state
    for name, p in params.items():
        state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros_like(p.data))
    opt.step()
