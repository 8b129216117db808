"""The Mamba block: in-projection, causal conv, SiLU, S6, gate, out-projection."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError
from .nn import Module, param, uniform_init
from .ssm import S6Parameters, s6_forward
from .tensor import Tensor, as_tensor


def default_heads(width: int, headdim: int = 16) -> int:
    """Delta-sharing groups: one per ``headdim`` channels, else a single group."""
    if width >= headdim and width % headdim == 0:
        return width // headdim
    return 1


class MambaBlock(Module):
    """``X = silu(conv(u W_x))``, ``Z = silu(u W_z)``, ``out = (S6(X) * Z) W_out``.

    With ``inner_norm`` an RMSNorm is applied to ``S6(X) * Z`` before the
    out-projection (used by the two-pass differential block).
    """

    def __init__(
        self,
        d_model: int,
        expand: int = 2,
        d_state: int = 16,
        d_conv: int = 4,
        heads: int | None = None,
        inner_norm: bool = False,
        conv_bias: bool = True,
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        norm_eps: float = 1e-5,
    ):
        if expand not in (1, 2):
            raise ConfigError(f"expand must be 1 or 2, got {expand}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.expand = expand
        self.d_inner = di = expand * d_model
        self.d_conv = d_conv
        self.norm_eps = norm_eps
        heads = default_heads(di) if heads is None else heads
        self.in_proj = uniform_init(rng, (d_model, 2 * di), d_model, dtype)
        self.conv_w = uniform_init(rng, (d_conv, di), d_conv, dtype)
        self.conv_b = param(np.zeros(di), dtype) if conv_bias else None
        self.s6 = S6Parameters(di, d_state, heads, dtype=dtype, rng=rng)
        self.norm_gain = param(np.ones(di), dtype) if inner_norm else None
        self.out_proj = uniform_init(rng, (di, d_model), di, dtype)

    def branches(self, u: Tensor) -> tuple[Tensor, Tensor]:
        """Pre-activation ``(x, z)`` branches of the in-projection."""
        xz = as_tensor(u) @ self.in_proj
        di = self.d_inner
        return xz[..., :di], xz[..., di:]

    def gated(self, u: Tensor, mode: str = "sequential") -> Tensor:
        """``S6(X) * Z``: the block output before the out-projection."""
        xb, zb = self.branches(u)
        X = F.silu(F.depthwise_causal_conv1d(xb, self.conv_w, self.conv_b))
        return s6_forward(X, self.s6, mode) * F.silu(zb)

    def forward(self, u: Tensor, mode: str = "sequential") -> Tensor:
        y = self.gated(u, mode)
        if self.norm_gain is not None:
            y = F.rmsnorm(y, self.norm_gain, self.norm_eps)
        return y @ self.out_proj

    __call__ = forward


def mamba_forward(u: Tensor, p: MambaBlock, mode: str = "sequential") -> Tensor:
    return p.forward(u, mode)


def param_count(p: Module) -> int:
    return p.param_count()
