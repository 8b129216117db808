"""AdamW with decoupled weight decay, warmup + cosine schedule, norm clipping."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .nn import Module
from .tensor import parameters_grad_norm

_NO_DECAY_TOKENS = ("norm", "bias", "A_log", "lam.", "conv_b")


def decays(name: str, p) -> bool:
    """Weight decay applies to matrices only; norms, biases, A_log and lambda are exempt."""
    if any(tok in name for tok in _NO_DECAY_TOKENS):
        return False
    return p.ndim >= 2


def lr_at(step: int, peak: float, warmup: int, total: int, floor_ratio: float = 0.1) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor_ratio * peak`` at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - warmup, 1)
    t = min(max(step - warmup, 0) / span, 1.0)
    return peak * (floor_ratio + (1.0 - floor_ratio) * 0.5 * (1.0 + math.cos(math.pi * t)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    total = parameters_grad_norm(params)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * scale
    return total


class AdamW:
    def __init__(
        self,
        model: Module,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ):
        if lr < 0 or weight_decay < 0 or eps <= 0:
            raise ConfigError("lr and weight_decay must be nonnegative, eps positive")
        self.named = list(model.named_parameters())
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.decay = {n: decays(n, p) for n, p in self.named}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in self.named:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.decay[n] and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for key in ("m", "v"):
            own = getattr(self, key)
            for n, arr in state[key].items():
                if n in own:
                    own[n] = np.asarray(arr, dtype=own[n].dtype).copy()
