"""Pure-numpy selective-scan kernels (fallback for the compiled extension).

Shapes: ``abar, bbar, h`` are ``(B, L, D, N)``, ``C`` is ``(B, L, N)``,
``x, y`` are ``(B, L, D)``.  The recurrence is ``h_t = abar_t * h_{t-1} +
bbar_t * x_t`` with ``h_{-1} = 0`` and ``y_t = sum_n C_t[n] h_t[:, n]``.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def linear_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of ``h_t = a_t h_{t-1} + b_t`` along axis 1."""
    h = np.empty_like(b)
    prev = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        prev = a[:, t] * prev + b[:, t]
        h[:, t] = prev
    return h


def linear_scan_blelloch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same result as :func:`linear_scan_sequential` via up-sweep/down-sweep.

    Elements ``(a, b)`` compose as ``(a2 * a1, a2 * b1 + b2)`` with identity
    ``(1, 0)``; the sequence is padded with identities to a power of two.
    """
    L = b.shape[1]
    P = _next_pow2(L)
    shape = (b.shape[0], P) + b.shape[2:]
    A = np.ones(shape, dtype=b.dtype)
    Bv = np.zeros(shape, dtype=b.dtype)
    A[:, :L] = a
    Bv[:, :L] = b
    s = 1
    while s < P:
        r = slice(2 * s - 1, P, 2 * s)
        l = slice(s - 1, P, 2 * s)
        Bv[:, r] = A[:, r] * Bv[:, l] + Bv[:, r]
        A[:, r] = A[:, r] * A[:, l]
        s *= 2
    A[:, P - 1] = 1
    Bv[:, P - 1] = 0
    s = P // 2
    while s >= 1:
        r = slice(2 * s - 1, P, 2 * s)
        l = slice(s - 1, P, 2 * s)
        tA = A[:, l].copy()
        tB = Bv[:, l].copy()
        pA = A[:, r].copy()
        pB = Bv[:, r].copy()
        A[:, l] = pA
        Bv[:, l] = pB
        A[:, r] = tA * pA
        Bv[:, r] = tA * pB + tB
        s //= 2
    # exclusive prefix -> inclusive state
    return a * Bv[:, :L] + b


def forward(abar, bbar, C, x, parallel: bool = False):
    drive = bbar * x[..., None]
    scan = linear_scan_blelloch if parallel else linear_scan_sequential
    h = scan(abar, drive)
    y = np.einsum("bldn,bln->bld", h, C)
    return y, h


def backward(abar, bbar, C, x, h, gy, parallel: bool = False):
    """Adjoint recurrence ``g_t = C_t gy_t + abar_{t+1} g_{t+1}`` in reverse time."""
    L = abar.shape[1]
    c = gy[..., None] * C[:, :, None, :]
    a_next = np.zeros_like(abar)
    a_next[:, : L - 1] = abar[:, 1:]
    scan = linear_scan_blelloch if parallel else linear_scan_sequential
    g = scan(a_next[:, ::-1], c[:, ::-1])[:, ::-1]
    h_prev = np.zeros_like(h)
    h_prev[:, 1:] = h[:, :-1]
    dabar = g * h_prev
    dbbar = g * x[..., None]
    dx = np.sum(g * bbar, axis=-1)
    dC = np.einsum("bld,bldn->bln", gy, h)
    return dabar, dbbar, dC, dx
