"""Differential variants of S6 and of the Mamba block.

All variants compute ``path_1(x) - lam * path_2(x)``, optionally normalize,
and scale the result by ``1 - lambda_init``.
"""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .errors import ConfigError
from .mamba import MambaBlock, default_heads
from .nn import Module, param, uniform_init
from .ssm import S6Parameters, s6_forward_many
from .tensor import Tensor, as_tensor, concat

LAMBDA_MODES = ("simple", "reparam", "scalar")
_DOT_CLAMP = 20.0


def lambda_init_schedule(layer_index: int) -> float:
    return 0.8 - 0.6 * math.exp(-0.3 * layer_index)


class DiffLambda(Module):
    """Learnable subtraction weight.

    ``simple``:  ``sigmoid(sum(lambda_bar)) + lambda_init`` with ``lambda_bar`` in R^D.
    ``scalar``:  same with a single-element ``lambda_bar``.
    ``reparam``: ``exp(q1.k1) - exp(q2.k2) + lambda_init`` (dot products clamped to +-20).
    """

    def __init__(self, dim: int, lambda_init: float, mode: str = "simple", dtype=np.float32, rng=None):
        if mode not in LAMBDA_MODES:
            raise ConfigError(f"unknown lambda mode {mode!r}; expected one of {LAMBDA_MODES}")
        self.mode = mode
        self.lambda_init = float(lambda_init)
        self.fixed: float | None = None
        if mode == "reparam":
            rng = rng if rng is not None else np.random.default_rng(0)
            self.q1, self.k1, self.q2, self.k2 = (param(rng.normal(0.0, 0.1, dim), dtype) for _ in range(4))
        else:
            self.lambda_bar = param(np.zeros(1 if mode == "scalar" else dim), dtype)

    def value(self) -> Tensor:
        if self.fixed is not None:
            return Tensor(np.asarray(self.fixed, dtype=self.dtype))
        if self.mode == "reparam":
            a = F.exp((self.q1 * self.k1).sum().clip(-_DOT_CLAMP, _DOT_CLAMP))
            b = F.exp((self.q2 * self.k2).sum().clip(-_DOT_CLAMP, _DOT_CLAMP))
            return a - b + self.lambda_init
        return F.sigmoid(self.lambda_bar.sum()) + self.lambda_init

    def __float__(self) -> float:
        return float(self.value().data)


def lambda_value(lam: DiffLambda) -> Tensor:
    return lam.value()


class DiffS6Block(Module):
    """Mamba block whose S6 is replaced by ``S6_1(X) - lam * S6_2(X)``."""

    def __init__(
        self,
        d_model: int,
        expand: int = 2,
        d_state: int = 16,
        d_conv: int = 4,
        heads: int | None = None,
        normalized: bool = True,
        lambda_init: float = 0.2,
        lambda_mode: str = "simple",
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        norm_eps: float = 1e-5,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.d_inner = di = expand * d_model
        self.normalized = normalized
        self.lambda_init = float(lambda_init)
        self.norm_eps = norm_eps
        heads = default_heads(di) if heads is None else heads
        self.in_proj = uniform_init(rng, (d_model, 2 * di), d_model, dtype)
        self.conv_w = uniform_init(rng, (d_conv, di), d_conv, dtype)
        self.conv_b = param(np.zeros(di), dtype)
        self.s6_1 = S6Parameters(di, d_state, heads, dtype=dtype, rng=rng)
        self.s6_2 = S6Parameters(di, d_state, heads, dtype=dtype, rng=rng)
        self.lam = DiffLambda(di, lambda_init, lambda_mode, dtype=dtype, rng=rng)
        self.norm_gain = param(np.ones(di), dtype) if normalized else None
        self.out_proj = uniform_init(rng, (di, d_model), di, dtype)

    def diff_s6(self, X: Tensor, normalized: bool | None = None, mode: str = "sequential") -> Tensor:
        normalized = self.normalized if normalized is None else normalized
        y1, y2 = s6_forward_many([X, X], [self.s6_1, self.s6_2], mode)
        d = y1 - self.lam.value() * y2
        if normalized:
            d = F.rmsnorm(d, self.norm_gain, self.norm_eps)
        return d * (1.0 - self.lambda_init)

    def forward(self, u: Tensor, mode: str = "sequential") -> Tensor:
        xz = as_tensor(u) @ self.in_proj
        di = self.d_inner
        X = F.silu(F.depthwise_causal_conv1d(xz[..., :di], self.conv_w, self.conv_b))
        return (self.diff_s6(X, mode=mode) * F.silu(xz[..., di:])) @ self.out_proj

    __call__ = forward


def diff_s6_forward(x: Tensor, params: DiffS6Block, normalized: bool = False, mode: str = "sequential") -> Tensor:
    return params.diff_s6(x, normalized, mode)


class DiffMamba(Module):
    """Two-pass differential Mamba: ``Mamba_1(x) - lam * Mamba_2(x)``.

    ``pre_sub_norm`` normalizes each path before its out-projection;
    ``post_sub_norm`` normalizes the difference.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        d_conv: int = 4,
        heads: int | None = None,
        pre_sub_norm: bool = True,
        post_sub_norm: bool = True,
        lambda_init: float = 0.2,
        lambda_mode: str = "simple",
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        norm_eps: float = 1e-5,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.lambda_init = float(lambda_init)
        self.norm_eps = norm_eps
        heads = default_heads(d_model) if heads is None else heads
        kw = dict(expand=1, d_state=d_state, d_conv=d_conv, heads=heads, inner_norm=pre_sub_norm, dtype=dtype)
        self.mamba1 = MambaBlock(d_model, rng=rng, **kw)
        self.mamba2 = MambaBlock(d_model, rng=rng, **kw)
        self.lam = DiffLambda(d_model, lambda_init, lambda_mode, dtype=dtype, rng=rng)
        self.sub_norm = param(np.ones(d_model), dtype) if post_sub_norm else None

    def difference(self, u: Tensor, mode: str = "sequential") -> Tensor:
        """Pre-normalization, unscaled ``Mamba_1(u) - lam * Mamba_2(u)``."""
        return self.mamba1.forward(u, mode) - self.lam.value() * self.mamba2.forward(u, mode)

    def forward(self, u: Tensor, mode: str = "sequential", normalized: bool | None = None) -> Tensor:
        d = self.difference(u, mode)
        normalized = self.sub_norm is not None if normalized is None else normalized
        if normalized:
            d = F.rmsnorm(d, self.sub_norm, self.norm_eps)
        return d * (1.0 - self.lambda_init)

    __call__ = forward


def diff_mamba_forward(x: Tensor, params: DiffMamba, normalized: bool = False, mode: str = "sequential") -> Tensor:
    return params.forward(x, mode, normalized)


class FusedDiffMamba(Module):
    """Single-pass normalized differential Mamba over replicated channels.

    The input is replicated to ``2 * d_model`` channels and both paths run as
    one Mamba pass without channel expansion.  Channels ``[d_model:]`` form the
    minuend, ``[:d_model]`` the subtrahend.  With ``shared_out_proj=False``
    (default) each half has its own out-projection rows, which keeps the
    parameter count equal to an expand-2 Mamba block.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        d_conv: int = 4,
        heads: int | None = None,
        post_mamba_norm: bool = True,
        post_sub_norm: bool = True,
        shared_out_proj: bool = False,
        lambda_init: float = 0.2,
        lambda_mode: str = "simple",
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        norm_eps: float = 1e-5,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        dp = d_model
        self.d_model = d_model
        self.d_path = dp
        self.d_inner = 2 * dp
        self.lambda_init = float(lambda_init)
        self.norm_eps = norm_eps
        self.shared_out_proj = shared_out_proj
        heads = default_heads(dp) if heads is None else heads
        self.in_proj = uniform_init(rng, (2, d_model, 2 * dp), d_model, dtype)
        self.conv_w = uniform_init(rng, (d_conv, 2 * dp), d_conv, dtype)
        self.conv_b = param(np.zeros(2 * dp), dtype)
        self.s6 = [S6Parameters(dp, d_state, heads, dtype=dtype, rng=rng) for _ in range(2)]
        self.mamba_norm = param(np.ones((2, dp)), dtype) if post_mamba_norm else None
        rows = dp if shared_out_proj else 2 * dp
        self.out_proj = uniform_init(rng, (rows, d_model), dp, dtype)
        self.sub_norm = param(np.ones(d_model), dtype) if post_sub_norm else None
        self.lam = DiffLambda(d_model, lambda_init, lambda_mode, dtype=dtype, rng=rng)

    def mamba_pass(self, u: Tensor, mode: str = "sequential") -> Tensor:
        """One Mamba pass over the replicated input; returns ``(B, L, 2, d_path)``."""
        u = as_tensor(u)
        B, L, Dm = u.shape
        dp = self.d_path
        if self.d_inner % 2:
            raise ConfigError(f"internal width {self.d_inner} must be even")
        x2 = concat([u, u], axis=-1).reshape(B, L, 2, Dm).transpose(0, 2, 1, 3)
        xz = x2 @ self.in_proj  # (B, 2, L, 2*dp)
        xb = xz[..., :dp].transpose(0, 2, 1, 3).reshape(B, L, 2 * dp)
        zb = xz[..., dp:].transpose(0, 2, 1, 3).reshape(B, L, 2 * dp)
        X = F.silu(F.depthwise_causal_conv1d(xb, self.conv_w, self.conv_b))
        ys = s6_forward_many([X[..., :dp], X[..., dp:]], self.s6, mode)
        Y = concat(ys, axis=-1) * F.silu(zb)
        Y = Y.reshape(B, L, 2, dp)
        if self.mamba_norm is not None:
            Y = F.rmsnorm(Y, self.mamba_norm, self.norm_eps)
        return Y

    def forward(self, u: Tensor, mode: str = "sequential") -> Tensor:
        u = as_tensor(u)
        squeeze = u.ndim == 2
        if squeeze:
            u = u.reshape((1,) + u.shape)
        Y = self.mamba_pass(u, mode)
        minuend = Y[:, :, 1, :]
        subtrahend = Y[:, :, 0, :]
        lam = self.lam.value()
        dp = self.d_path
        if self.shared_out_proj:
            O = (minuend - lam * subtrahend) @ self.out_proj
        else:
            O = minuend @ self.out_proj[dp:] - lam * (subtrahend @ self.out_proj[:dp])
        if self.sub_norm is not None:
            O = F.rmsnorm(O, self.sub_norm, self.norm_eps)
        O = O * (1.0 - self.lambda_init)
        return O.reshape(O.shape[1:]) if squeeze else O

    __call__ = forward

    def to_two_pass(self) -> DiffMamba:
        """Equivalent :class:`DiffMamba` sharing copies of these weights."""
        dp = self.d_path
        dtype = self.dtype
        out = DiffMamba(
            self.d_model,
            d_state=self.s6[0].d_state,
            d_conv=self.conv_w.shape[0],
            heads=self.s6[0].heads,
            pre_sub_norm=self.mamba_norm is not None,
            post_sub_norm=self.sub_norm is not None,
            lambda_init=self.lambda_init,
            lambda_mode=self.lam.mode,
            dtype=dtype,
            norm_eps=self.norm_eps,
        )
        for block, half in ((out.mamba1, 1), (out.mamba2, 0)):
            sl = slice(half * dp, (half + 1) * dp)
            block.in_proj.data = self.in_proj.data[half].copy()
            block.conv_w.data = self.conv_w.data[:, sl].copy()
            block.conv_b.data = self.conv_b.data[sl].copy()
            block.s6.load_state_dict(self.s6[half].state_dict())
            if self.mamba_norm is not None:
                block.norm_gain.data = self.mamba_norm.data[half].copy()
            if self.shared_out_proj:
                block.out_proj.data = self.out_proj.data.copy()
            else:
                block.out_proj.data = self.out_proj.data[sl].copy()
        out.lam.load_state_dict(self.lam.state_dict())
        out.lam.fixed = self.lam.fixed
        if self.sub_norm is not None:
            out.sub_norm.data = self.sub_norm.data.copy()
        return out


def fused_diff_mamba_forward(x: Tensor, params: FusedDiffMamba, mode: str = "sequential") -> Tensor:
    return params.forward(x, mode)
