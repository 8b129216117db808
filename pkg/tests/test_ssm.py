import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmamba import functional as F
from diffmamba.errors import ConfigError, NumericalError
from diffmamba.ssm import (
    S6Parameters,
    ScanElement,
    combine,
    discretize,
    s6_forward,
    s6_forward_many,
    scan_parallel,
    scan_sequential,
    selective_params,
)
from diffmamba.tensor import Tensor, no_grad


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def params(D=3, N=4, heads=1, seed=0):
    return S6Parameters(D, N, heads, dtype=np.float64, rng=np.random.default_rng(seed))


def single(abar, bbar, C, x):
    """Wrap 1-channel hand cases: abar/bbar/C per step, N = 1."""
    L = len(x)
    return (
        t64(np.asarray(abar, float).reshape(L, 1, 1)),
        t64(np.asarray(bbar, float).reshape(L, 1, 1)),
        t64(np.asarray(C, float).reshape(L, 1)),
        t64(np.asarray(x, float).reshape(L, 1)),
    )


class TestSelectiveParams:
    def test_zero_input(self):
        p = params()
        p.delta_bias.data[:] = 0.0
        Bt, Ct, delta = selective_params(t64(np.zeros((5, 3))), p)
        assert not Bt.data.any() and not Ct.data.any()
        np.testing.assert_allclose(delta.data, math.log(2))

    def test_input_independent_delta(self, rng):
        p = params()
        p.S_delta.data[:] = 0.0
        p.delta_bias.data[:] = 0.7
        _, _, delta = selective_params(t64(rng.normal(size=(6, 3))), p)
        np.testing.assert_allclose(delta.data, math.log1p(math.exp(0.7)))

    def test_matches_step_loop(self, rng):
        p = params(D=4, heads=2)
        x = rng.normal(size=(5, 4))
        Bt, Ct, delta = selective_params(t64(x), p)
        for t in range(5):
            np.testing.assert_allclose(Bt.data[t], p.S_B.data @ x[t], atol=1e-12)
            np.testing.assert_allclose(Ct.data[t], p.S_C.data @ x[t], atol=1e-12)
            dh = np.log1p(np.exp(p.S_delta.data @ x[t] + p.delta_bias.data))
            np.testing.assert_allclose(delta.data[t], np.repeat(dh, 2), atol=1e-12)

    def test_non_finite_reports_step(self):
        x = np.zeros((6, 3))
        x[4, 1] = np.nan
        with pytest.raises(NumericalError, match="step 4"):
            selective_params(t64(x), params())

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            S6Parameters(6, 4, heads=4)


class TestDiscretize:
    def test_zero_delta(self):
        abar, bbar = discretize(t64(-np.ones((2, 3))), t64(np.ones((4, 3))), t64(np.zeros((4, 2))))
        assert (abar.data == 1).all() and (bbar.data == 0).all()

    def test_zero_A(self, rng):
        abar, _ = discretize(t64(np.zeros((2, 3))), t64(np.ones((4, 3))), t64(rng.uniform(0.1, 2, (4, 2))))
        assert (abar.data == 1).all()

    def test_closed_form(self):
        abar, _ = discretize(t64([[-1.0]]), t64([[1.0]]), t64([[math.log(2)]]))
        assert abar.data.item() == pytest.approx(0.5)

    def test_decay_in_unit_interval(self, rng):
        p = params(D=8, N=16)
        Bt, _, delta = selective_params(t64(rng.normal(size=(20, 8)) * 5), p)
        abar, _ = discretize(p.A, Bt, delta)
        assert ((abar.data > 0) & (abar.data < 1)).all()


class TestScanHandCases:
    @pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
    def test_running_sum(self, scan):
        np.testing.assert_allclose(scan(*single([1] * 3, [1] * 3, [1] * 3, [1, 1, 1])).data.ravel(), [1, 2, 3])

    @pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
    def test_memoryless(self, scan):
        y = scan(*single([0] * 3, [2, 3, 4], [5, 6, 7], [1, -1, 2])).data.ravel()
        np.testing.assert_allclose(y, [10, -18, 56])

    @pytest.mark.parametrize("scan", [scan_sequential, scan_parallel])
    def test_geometric_decay(self, scan):
        np.testing.assert_allclose(scan(*single([0.5] * 3, [1] * 3, [1] * 3, [1, 0, 0])).data.ravel(), [1, 0.5, 0.25])

    def test_single_step(self):
        y = scan_parallel(*single([0.3], [2.0], [1.5], [4.0])).data.item()
        assert y == pytest.approx(1.5 * 2.0 * 4.0)


class TestScanElement:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_associative(self, seed):
        r = np.random.default_rng(seed)
        e = [ScanElement(r.uniform(0, 1, 5), r.normal(size=5)) for _ in range(3)]
        left, right = combine(combine(e[0], e[1]), e[2]), combine(e[0], combine(e[1], e[2]))
        np.testing.assert_allclose(left.a, right.a, rtol=1e-14)
        np.testing.assert_allclose(left.b, right.b, rtol=1e-12, atol=1e-14)

    def test_identity(self):
        e = ScanElement(np.array([0.3]), np.array([2.0]))
        one = ScanElement(np.ones(1), np.zeros(1))
        assert combine(one, e) == e or np.allclose(combine(one, e).b, e.b)


class TestS6Forward:
    def test_zero_input(self):
        assert not s6_forward(t64(np.zeros((5, 3))), params()).data.any()

    @pytest.mark.parametrize("L", [1, 2, 3, 7, 64])
    def test_modes_agree(self, backend, rng, L):
        p = params(D=4, N=5)
        x = t64(rng.normal(size=(2, L, 4)))
        np.testing.assert_allclose(
            s6_forward(x, p, "parallel").data, s6_forward(x, p, "sequential").data, rtol=1e-10, atol=1e-12
        )

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            s6_forward(t64(np.zeros((2, 3))), params(), "chunked")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 14), st.integers(0, 2**31 - 1))
    def test_causality(self, t0, seed):
        r = np.random.default_rng(seed)
        p = params(seed=seed % 7)
        x = r.normal(size=(16, 3))
        y0 = s6_forward(t64(x), p).data
        x[t0 + 1 :] += r.normal(size=x[t0 + 1 :].shape)
        y1 = s6_forward(t64(x), p).data
        assert np.array_equal(y0[: t0 + 1], y1[: t0 + 1])

    def test_linear_given_frozen_parameters(self, rng):
        p = params(D=3, N=4)
        xhat = t64(rng.normal(size=(10, 3)))
        with no_grad():
            Bt, Ct, delta = selective_params(xhat, p)
            abar, bbar = discretize(p.A, Bt, delta)

        def run(x):
            return scan_sequential(abar, bbar, Ct, t64(x)).data

        x1, x2 = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        np.testing.assert_allclose(run(2.5 * x1 - 0.7 * x2), 2.5 * run(x1) - 0.7 * run(x2), atol=1e-6)

    @pytest.mark.parametrize("mode", ["sequential", "parallel"])
    def test_grad_check(self, backend, rng, mode):
        p = params(D=2, N=3, seed=3)
        w = t64(rng.normal(size=(5, 2)))
        x = t64(rng.normal(size=(5, 2)))
        leaves = [x, p.A_log, p.S_B, p.S_C, p.S_delta, p.delta_bias]
        assert F.grad_check(lambda *_: (s6_forward(x, p, mode) * w).sum(), leaves) <= 1e-5

    def test_many_equals_separate(self, rng):
        ps = [params(seed=1), params(seed=2)]
        xs = [t64(rng.normal(size=(2, 6, 3))) for _ in range(2)]
        together = s6_forward_many(xs, ps)
        for x, p, y in zip(xs, ps, together):
            np.testing.assert_allclose(y.data, s6_forward(x, p).data, atol=1e-14)

    def test_f32_parallel_tolerance(self, rng):
        p = S6Parameters(8, 16, 1, dtype=np.float32, rng=rng)
        x = Tensor(rng.normal(size=(256, 8)).astype(np.float32))
        a, b = s6_forward(x, p, "parallel").data, s6_forward(x, p, "sequential").data
        assert np.max(np.abs(a - b) / (np.abs(b) + 1e-6)) <= 1e-5 or np.allclose(a, b, rtol=1e-5, atol=1e-6)
