"""Exact materialization of the implicit attention matrices.

For a fixed input every S6 channel acts as a causal linear map ``y = M x``
with ``M[t, s] = C_t . (prod_{k=s+1..t} abar_k) * bbar_s``.  The Mamba block
adds the gate, the SiLU-as-diagonal factor and the convolution matrix on top.
All materializations are computed directly from the products (no scan) so they
can serve as brute-force oracles for the scan kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .diff import DiffMamba, DiffS6Block, FusedDiffMamba
from .errors import ConfigError, DimensionError, ResourceError
from .mamba import MambaBlock
from .ssm import S6Parameters, selective_params
from .tensor import Tensor, as_tensor, no_grad

DEFAULT_CAP = 512


@dataclass
class ImplicitOperator:
    """Causal token-mixing operator.

    ``matrix`` is ``(L, L)`` for a single channel, or ``(L, L, D_out, D_in)``
    for a whole block (``[t, s]`` holds the channel-mixing matrix from source
    step ``s`` to target step ``t``).  ``offset`` collects input-independent
    terms (conv bias) so that ``apply(x) = matrix x + offset`` exactly.
    """

    matrix: np.ndarray
    source: str
    channel: int | None = None
    lam: float | None = None
    offset: np.ndarray | None = field(default=None)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        if self.matrix.ndim == 2:
            y = self.matrix @ x
        else:
            y = np.einsum("tsoi,si->to", self.matrix, x)
        if self.offset is not None:
            y = y + self.offset
        return y

    def upper_triangle(self) -> np.ndarray:
        L = self.length
        iu = np.triu_indices(L, k=1)
        return self.matrix[iu]


def _check_cap(L: int, cap: int) -> None:
    if L > cap:
        raise ResourceError(f"sequence length {L} exceeds materialization cap {cap}")


def _seq(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim != 2:
        raise DimensionError(f"expected a single (L, D) sequence, got shape {x.shape}")
    return x


def s6_kernel_matrix(abar: np.ndarray, bbar: np.ndarray, C: np.ndarray) -> np.ndarray:
    """``M[t, s] = sum_n C[t, n] * prod_{k=s+1..t} abar[k, n] * bbar[s, n]``.

    ``abar``, ``bbar`` are ``(L, N)`` for one channel, ``C`` is ``(L, N)``.
    """
    L, N = abar.shape
    M = np.zeros((L, L), dtype=np.result_type(abar, bbar, C))
    for s in range(L):
        decay = np.ones((L - s, N), dtype=M.dtype)
        if L - s > 1:
            decay[1:] = np.cumprod(abar[s + 1 :], axis=0)
        M[s:, s] = np.sum(C[s:] * decay * bbar[s], axis=1)
    return M


def materialize_s6(x, p: S6Parameters, channel: int, cap: int = DEFAULT_CAP) -> ImplicitOperator:
    """Operator of one S6 channel for input ``x`` of shape ``(L, D)``."""
    x = _seq(x)
    _check_cap(x.shape[0], cap)
    if not 0 <= channel < p.d_channels:
        raise DimensionError(f"channel {channel} out of range for {p.d_channels} channels")
    with no_grad():
        Bt, Ct, delta = selective_params(Tensor(x), p)
        A = p.A.data
    d = delta.data[:, channel]
    abar = np.exp(d[:, None] * A[channel][None, :])
    bbar = d[:, None] * Bt.data
    return ImplicitOperator(s6_kernel_matrix(abar, bbar, Ct.data), "s6", channel)


def conv_matrix(kernel: np.ndarray, L: int) -> np.ndarray:
    """Toeplitz matrix of a causal depthwise kernel ``(K,)``: ``M[t, t-j] = kernel[K-1-j]``."""
    K = kernel.shape[0]
    M = np.zeros((L, L), dtype=kernel.dtype)
    for j in range(min(K, L)):
        idx = np.arange(j, L)
        M[idx, idx - j] = kernel[K - 1 - j]
    return M


def _mamba_channel_ops(u: np.ndarray, block: MambaBlock, channels) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-channel ``(matrix, offset)`` acting on the in-projected x-branch."""
    L = u.shape[0]
    with no_grad():
        xb, zb = block.branches(Tensor(u))
        v = F.depthwise_causal_conv1d(xb, block.conv_w, block.conv_b)
        X = F.silu(v)
        Bt, Ct, delta = selective_params(X, block.s6)
        A = block.s6.A.data
    v, z = v.data, zb.data
    gate = z * (0.5 * (1.0 + np.tanh(0.5 * z)))
    sig_v = 0.5 * (1.0 + np.tanh(0.5 * v))
    bias = np.zeros(block.d_inner) if block.conv_b is None else block.conv_b.data
    mats, offs = [], []
    for c in channels:
        d = delta.data[:, c]
        alpha = s6_kernel_matrix(np.exp(d[:, None] * A[c][None, :]), d[:, None] * Bt.data, Ct.data)
        left = gate[:, c][:, None] * alpha * sig_v[:, c][None, :]
        mats.append(left @ conv_matrix(block.conv_w.data[:, c], L))
        offs.append(left @ np.full(L, bias[c]))
    return mats, offs


def materialize_mamba(u, block: MambaBlock, channel: int, cap: int = DEFAULT_CAP) -> ImplicitOperator:
    """Operator of one inner channel of a Mamba block.

    ``matrix = diag(silu(z)) . alpha . diag(sigmoid(conv)) . M_conv`` acts on the
    in-projected x-branch of that channel; the result reproduces the channel
    of ``block.gated(u)`` (before the out-projection).
    """
    u = _seq(u)
    _check_cap(u.shape[0], cap)
    if not 0 <= channel < block.d_inner:
        raise DimensionError(f"channel {channel} out of range for {block.d_inner} channels")
    mats, offs = _mamba_channel_ops(u, block, [channel])
    return ImplicitOperator(mats[0], "mamba", channel, offset=offs[0])


def mamba_block_operator(u, block: MambaBlock, cap: int = DEFAULT_CAP) -> ImplicitOperator:
    """Full-block operator including in- and out-projections: ``block(u) = T u + offset``."""
    if block.norm_gain is not None:
        raise ConfigError("block operator is only defined for blocks without an inner norm")
    u = _seq(u)
    _check_cap(u.shape[0], cap)
    mats, offs = _mamba_channel_ops(u, block, range(block.d_inner))
    A = np.stack(mats)  # (C, L, L)
    w_in = block.in_proj.data[:, : block.d_inner]  # (Din, C)
    w_out = block.out_proj.data  # (C, Dout)
    T = np.einsum("co,cts,ic->tsoi", w_out, A, w_in)
    offset = np.einsum("co,ct->to", w_out, np.stack(offs))
    return ImplicitOperator(T, "mamba-block", offset=offset)


def materialize_diff(op1: ImplicitOperator, op2: ImplicitOperator, lam: float) -> ImplicitOperator:
    """``op1 - lam * op2`` (offsets combine the same way)."""
    if op1.matrix.shape != op2.matrix.shape:
        raise DimensionError(f"operator shapes differ: {op1.matrix.shape} vs {op2.matrix.shape}")
    if op1.channel != op2.channel:
        raise DimensionError(f"operator channels differ: {op1.channel} vs {op2.channel}")
    lam = float(lam)
    offset = None
    if op1.offset is not None or op2.offset is not None:
        o1 = 0.0 if op1.offset is None else op1.offset
        o2 = 0.0 if op2.offset is None else op2.offset
        offset = o1 - lam * o2
    return ImplicitOperator(op1.matrix - lam * op2.matrix, f"diff-{op1.source}", op1.channel, lam, offset)


def materialize_diff_s6(x, block: DiffS6Block, channel: int, cap: int = DEFAULT_CAP) -> ImplicitOperator:
    """Operator of the unnormalized, unscaled difference ``S6_1 - lam S6_2`` on S6 input ``x``."""
    op1 = materialize_s6(x, block.s6_1, channel, cap)
    op2 = materialize_s6(x, block.s6_2, channel, cap)
    return materialize_diff(op1, op2, float(block.lam))


def materialize_diff_mamba(u, block: DiffMamba | FusedDiffMamba, cap: int = DEFAULT_CAP) -> ImplicitOperator:
    """Block operator of ``Mamba_1 - lam Mamba_2`` (pre-normalization, unscaled)."""
    if isinstance(block, FusedDiffMamba):
        block = block.to_two_pass()
    op1 = mamba_block_operator(u, block.mamba1, cap)
    op2 = mamba_block_operator(u, block.mamba2, cap)
    return materialize_diff(op1, op2, float(block.lam))


def operator_stats(op: ImplicitOperator, target: int | None = None) -> dict:
    """Row-mass profile, off-target mass and row entropy of ``|A[t, :]|``.

    ``target`` is a source column; ``None`` uses the diagonal (each row's own
    position).  All-zero rows get entropy 0 and off-target mass 0.
    """
    M = op.matrix
    if M.ndim != 2:
        raise DimensionError("operator_stats needs a single-channel (L, L) operator")
    mag = np.abs(M)
    mass = mag.sum(axis=1)
    L = M.shape[0]
    safe = np.where(mass > 0, mass, 1.0)
    prob = mag / safe[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(prob > 0, prob * np.log(prob), 0.0), axis=1)
    cols = np.arange(L) if target is None else np.full(L, int(target))
    on = np.where(cols <= np.arange(L), mag[np.arange(L), np.minimum(cols, L - 1)], 0.0)
    off = np.where(mass > 0, 1.0 - on / safe, 0.0)
    total = mass.sum()
    return {
        "row_mass": mass,
        "row_entropy": ent,
        "off_target_per_row": off,
        "off_target_mass": float((mass - on).sum() / total) if total > 0 else 0.0,
    }
