"""Differentiable building blocks on top of :class:`~diffmamba.tensor.Tensor`.

Each function computes its forward with numpy and registers an analytic
backward on the tape.  Layout is ``(batch, length, channel)`` throughout;
functions that accept sequences also take an unbatched ``(length, channel)``
input.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericalError
from .tensor import Tensor, as_tensor, no_grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _exp(x):
    y = np.exp(x)
    return y, lambda g: g * y


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False), lambda g: g * _sigmoid(x)


def _sig(x):
    s = _sigmoid(x)
    return s, lambda g: g * s * (1.0 - s)


def _silu(x):
    s = _sigmoid(x)
    return x * s, lambda g: g * (s + x * s * (1.0 - s))


_POINTWISE = {"exp": _exp, "softplus": _softplus, "sigmoid": _sig, "silu": _silu}


def pointwise(name: str, x: Tensor) -> Tensor:
    """Elementwise ``exp``, ``softplus``, ``sigmoid`` or ``silu``."""
    try:
        fn = _POINTWISE[name]
    except KeyError:
        raise ConfigError(f"unknown pointwise function {name!r}; expected one of {sorted(_POINTWISE)}") from None
    x = as_tensor(x)
    y, bw = fn(x.data)
    return Tensor._make(y, name, (x,), lambda g: (bw(g),))


def exp(x):
    return pointwise("exp", x)


def softplus(x):
    return pointwise("softplus", x)


def sigmoid(x):
    return pointwise("sigmoid", x)


def silu(x):
    return pointwise("silu", x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._make(y, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(y, "log_softmax", (x,), bw)


def rmsnorm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis.

    ``gain`` may be any shape broadcastable against ``x``'s trailing axes,
    e.g. ``(groups, width)`` for per-group gains on a ``(..., groups, width)``
    input.
    """
    if eps <= 0:
        raise ConfigError(f"rmsnorm eps must be positive, got {eps}")
    x = as_tensor(x)
    xd = x.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r
    if gain is None:
        inputs = (x,)
        y = xhat
    else:
        gain = as_tensor(gain)
        inputs = (x, gain)
        y = xhat * gain.data

    def bw(g):
        gg = g if gain is None else g * gain.data
        n = xd.shape[-1]
        dx = r * gg - xhat * (r / n) * np.sum(gg * xhat, axis=-1, keepdims=True)
        if gain is None:
            return (dx,)
        dgain = g * xhat
        lead = dgain.ndim - gain.ndim
        dgain = dgain.sum(axis=tuple(range(lead))) if lead else dgain
        return dx, dgain.reshape(gain.shape)

    return Tensor._make(y.astype(xd.dtype, copy=False), "rmsnorm", inputs, bw)


def depthwise_causal_conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel causal convolution.

    ``y[t, d] = sum_k kernels[k, d] * x[t - K + 1 + k, d] + bias[d]`` with the
    input left-padded by ``K - 1`` zeros, so position ``t`` only sees ``<= t``.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if kernels.ndim != 2 or kernels.shape[1] != xd.shape[-1]:
        raise DimensionError(f"conv kernels {kernels.shape} do not match input {x.shape}")
    K = kernels.shape[0]
    if K < 1:
        raise ConfigError("conv kernel size must be >= 1")
    B, L, D = xd.shape
    xp = np.zeros((B, L + K - 1, D), dtype=xd.dtype)
    xp[:, K - 1 :] = xd
    w = kernels.data
    y = np.zeros_like(xd)
    for k in range(K):
        y += w[k] * xp[:, k : k + L]
    inputs = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
        inputs.append(bias)

    def bw(g):
        g3 = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w)
        for k in range(K):
            dxp[:, k : k + L] += w[k] * g3
            dw[k] = np.sum(g3 * xp[:, k : k + L], axis=(0, 1))
        dx = dxp[:, K - 1 :]
        out = [dx[0] if squeeze else dx, dw]
        if bias is not None:
            out.append(g3.sum(axis=(0, 1)))
        return tuple(out)

    return Tensor._make(y[0] if squeeze else y, "conv1d", tuple(inputs), bw)


def cross_entropy(
    logits: Tensor,
    targets,
    mask=None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``mask`` (same shape as ``targets``) selects contributing positions.
    ``reduction="mean"`` averages over them, ``"sum"`` returns the total.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    bad = np.argwhere(((targets < 0) | (targets >= V)) & (w != 0))
    if len(bad):
        raise DataError(f"target out of range [0, {V}) at position {tuple(int(i) for i in bad[0])}")
    targets = np.where(w != 0, targets, 0)
    count = float(w.sum())
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    total = -np.sum(picked.astype(np.float64) * w)
    if reduction == "mean":
        scale = 1.0 / max(count, 1.0)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    value = np.asarray(total * scale, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return ((p * (w * scale)[..., None] * g).astype(logits.dtype, copy=False),)

    return Tensor._make(value, "cross_entropy", (logits,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DataError(f"token id out of range [0, {V})")

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._make(weight.data[ids], "embedding", (weight,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called as ``f(*xs)`` and must return a scalar.  The relative error
    per coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ConfigError("grad_check requires float64 tensors")
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for ti, t in enumerate(xs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f(*xs).data)
                flat[i] = orig - h
                fm = float(f(*xs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            if not (np.isfinite(num) and np.isfinite(a)):
                raise NumericalError(f"non-finite gradient at input {ti}, coordinate {np.unravel_index(i, t.shape)}")
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
