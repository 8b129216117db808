"""Selective state-space (S6) layer.

Per step ``t`` the input-dependent parameters are::

    B_t = S_B x_t,  C_t = S_C x_t,  delta_t = softplus(S_delta x_t + delta_bias)
    abar_t = exp(delta_t * A),  bbar_t = delta_t * B_t

and each channel runs ``h_t = abar_t h_{t-1} + bbar_t x_t``, ``y_t = C_t . h_t``.
``delta`` is shared within head groups of ``D // heads`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from . import kernels
from .errors import ConfigError, DimensionError, NumericalError
from .nn import Module, param, uniform_init
from .tensor import Tensor, as_tensor, concat

MODES = ("sequential", "parallel")


class S6Parameters(Module):
    """Weights of one selective SSM over ``d_channels`` channels.

    ``A`` is stored as ``A_log`` with ``A = -exp(A_log)`` so that every
    ``exp(delta * A)`` stays in (0, 1).
    """

    def __init__(
        self,
        d_channels: int,
        d_state: int = 16,
        heads: int = 1,
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        if heads < 1 or d_channels % heads:
            raise ConfigError(f"heads={heads} must divide d_channels={d_channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_channels = d_channels
        self.d_state = d_state
        self.heads = heads
        D, N = d_channels, d_state
        # S4D-real: A[d, n] = -(n + 1)
        self.A_log = param(np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1)), dtype)
        self.S_B = uniform_init(rng, (N, D), D, dtype)
        self.S_C = uniform_init(rng, (N, D), D, dtype)
        self.S_delta = uniform_init(rng, (heads, D), D, dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=heads))
        self.delta_bias = param(dt + np.log(-np.expm1(-dt)), dtype)

    @property
    def A(self) -> Tensor:
        return -F.exp(self.A_log)


@dataclass
class ScanElement:
    """One step ``h -> a * h + b`` of the linear recurrence."""

    a: np.ndarray
    b: np.ndarray

    def __matmul__(self, later: "ScanElement") -> "ScanElement":
        return combine(self, later)


def combine(first: ScanElement, second: ScanElement) -> ScanElement:
    """Compose ``first`` then ``second``: ``(a2 a1, a2 b1 + b2)``."""
    return ScanElement(second.a * first.a, second.a * first.b + second.b)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected (L, D) or (B, L, D) input, got {x.shape}")
    return x, False


def _check_finite(x: Tensor) -> None:
    bad = ~np.isfinite(x.data)
    if bad.any():
        step = int(np.argwhere(bad)[0][-2])
        raise NumericalError(f"non-finite input at step {step}")


def selective_params(x: Tensor, p: S6Parameters) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(B_t, C_t, delta_t)`` with shapes (.., L, N), (.., L, N), (.., L, D)."""
    x = as_tensor(x)
    _check_finite(x)
    if x.shape[-1] != p.d_channels:
        raise DimensionError(f"input width {x.shape[-1]} != S6 channels {p.d_channels}")
    Bt = x @ p.S_B.T
    Ct = x @ p.S_C.T
    dh = F.softplus(x @ p.S_delta.T + p.delta_bias)
    lead = x.shape[:-1]
    hd = p.d_channels // p.heads
    if hd == 1:
        delta = dh
    else:
        delta = dh.reshape(lead + (p.heads, 1)).broadcast_to(lead + (p.heads, hd)).reshape(lead + (p.d_channels,))
    return Bt, Ct, delta


def discretize(A: Tensor, Bt: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """``abar = exp(delta * A)``, ``bbar = delta * B`` (Euler rule on B)."""
    A, Bt, delta = as_tensor(A), as_tensor(Bt), as_tensor(delta)
    d4 = delta.reshape(delta.shape + (1,))
    abar = F.exp(d4 * A)
    bbar = d4 * Bt.reshape(Bt.shape[:-1] + (1, Bt.shape[-1]))
    return abar, bbar


def _scan(abar: Tensor, bbar: Tensor, C: Tensor, x: Tensor, parallel: bool) -> Tensor:
    abar, bbar, C, x = (as_tensor(t) for t in (abar, bbar, C, x))
    squeeze = x.ndim == 2
    if squeeze:
        abar, bbar, C, x = (t.reshape((1,) + t.shape) for t in (abar, bbar, C, x))
    dt = x.dtype
    arrs = [np.ascontiguousarray(t.data, dtype=dt) for t in (abar, bbar, C, x)]
    B, L, D = arrs[3].shape
    N = arrs[2].shape[-1]
    if arrs[0].shape != (B, L, D, N) or arrs[1].shape != (B, L, D, N) or arrs[2].shape != (B, L, N):
        raise DimensionError(
            f"scan shapes inconsistent: abar {abar.shape}, bbar {bbar.shape}, C {C.shape}, x {x.shape}"
        )
    y, h = kernels.forward(*arrs, parallel)

    def bw(g):
        return kernels.backward(*arrs, h, np.ascontiguousarray(g, dtype=dt), parallel)

    out = Tensor._make(y, "selective_scan", (abar, bbar, C, x), bw)
    return out.reshape(out.shape[1:]) if squeeze else out


def scan_sequential(abar, bbar, C, x) -> Tensor:
    """Left-to-right recurrence with ``h_0 = 0``; the reference path."""
    return _scan(abar, bbar, C, x, parallel=False)


def scan_parallel(abar, bbar, C, x) -> Tensor:
    """Work-efficient (Blelloch) scan; same result as :func:`scan_sequential`."""
    return _scan(abar, bbar, C, x, parallel=True)


def s6_forward(x: Tensor, p: S6Parameters, mode: str = "sequential") -> Tensor:
    return s6_forward_many([x], [p], mode)[0]


def s6_forward_many(xs: Sequence[Tensor], ps: Sequence[S6Parameters], mode: str = "sequential") -> list[Tensor]:
    """Run several independent S6 layers through a single scan invocation.

    Inputs must share ``(B, L)`` and channel width; the layers are stacked
    along the batch axis for the kernel call.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown scan mode {mode!r}; expected one of {MODES}")
    batched = [_batched(x) for x in xs]
    squeeze = batched[0][1]
    parts = []
    for (x, _), p in zip(batched, ps):
        Bt, Ct, delta = selective_params(x, p)
        abar, bbar = discretize(p.A, Bt, delta)
        parts.append((abar, bbar, Ct, x))
    if len(parts) == 1:
        abar, bbar, Ct, x = parts[0]
    else:
        abar, bbar, Ct, x = (concat([pt[i] for pt in parts], axis=0) for i in range(4))
    y = _scan(abar, bbar, Ct, x, parallel=(mode == "parallel"))
    nb = batched[0][0].shape[0]
    outs = [y[i * nb : (i + 1) * nb] for i in range(len(parts))] if len(parts) > 1 else [y]
    return [o.reshape(o.shape[1:]) if squeeze else o for o in outs]
