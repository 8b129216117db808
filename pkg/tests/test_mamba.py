import numpy as np
import pytest

from diffmamba import functional as F
from diffmamba.mamba import MambaBlock, default_heads
from diffmamba.errors import ConfigError
from diffmamba.ssm import s6_forward
from diffmamba.tensor import Tensor

F64 = np.float64


def block(Dm=4, expand=2, N=4, K=4, seed=0, **kw):
    return MambaBlock(Dm, expand=expand, d_state=N, d_conv=K, dtype=F64, rng=np.random.default_rng(seed), **kw)


def test_zero_input_zero_output():
    b = block()
    assert not b(Tensor(np.zeros((6, 4)))).data.any()


def test_prefix_bit_identical_under_future_perturbation(rng):
    b = block(seed=2)
    u = rng.normal(size=(2, 12, 4))
    y0 = b(Tensor(u)).data
    u[:, 7:] = rng.normal(size=u[:, 7:].shape)
    y1 = b(Tensor(u)).data
    assert np.array_equal(y0[:, :7], y1[:, :7])


def test_modes_agree(rng):
    b = block(Dm=8, N=16)
    u = Tensor(rng.normal(size=(2, 33, 8)))
    np.testing.assert_allclose(b(u, "parallel").data, b(u, "sequential").data, rtol=1e-10, atol=1e-12)


def test_collapses_without_gate_and_conv(rng):
    """Identity conv tap and the gate divided out leave Linear, SiLU, S6."""
    b = block(expand=1, K=3)
    b.conv_w.data[:] = 0.0
    b.conv_w.data[-1] = 1.0
    u = rng.normal(size=(7, 4))
    xb, zb = b.branches(Tensor(u))
    ungated = b.gated(Tensor(u)).data / F.silu(zb).data
    np.testing.assert_allclose(ungated, s6_forward(F.silu(Tensor(u @ b.in_proj.data[:, :4])), b.s6).data, rtol=1e-9)


def test_grad_check_whole_block(rng):
    b = block(seed=5)
    u = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(8, 4)))
    assert F.grad_check(lambda *_: (b(u) * w).sum(), [u] + b.parameters()) <= 1e-5


def test_param_count_by_hand():
    b = MambaBlock(1, expand=1, d_state=1, d_conv=1, heads=1, conv_bias=False, dtype=F64)
    # in_proj 1x2, conv 1x1, S6: A_log 1x1 + S_B 1x1 + S_C 1x1 + S_delta 1x1 + delta_bias 1, out_proj 1x1
    assert b.param_count() == 2 + 1 + (1 + 1 + 1 + 1 + 1) + 1


def test_projection_counts_scale_quadratically():
    small, big = MambaBlock(64, dtype=F64), MambaBlock(128, dtype=F64)
    ratio = (big.in_proj.data.size + big.out_proj.data.size) / (small.in_proj.data.size + small.out_proj.data.size)
    assert ratio == 4.0
    assert 3.5 < big.param_count() / small.param_count() < 4.0


def test_default_heads():
    assert default_heads(64) == 4
    assert default_heads(20) == 1


def test_bad_expand():
    with pytest.raises(ConfigError):
        MambaBlock(4, expand=3)
