# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernels.

Same contract as ``_scan_py``: ``abar, bbar, h`` are (B, L, D, N), ``C`` is
(B, L, N), ``x, y`` are (B, L, D).  Each (batch, channel, state) lane is
independent; the parallel path runs a Blelloch up-sweep/down-sweep per lane.
"""

import numpy as np
from cython cimport floating
from libc.stdlib cimport malloc, free

BACKEND = "cython"


cdef Py_ssize_t _next_pow2(Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t p = 1
    while p < n:
        p *= 2
    return p


cdef void _blelloch(floating* a, floating* b, Py_ssize_t P) noexcept nogil:
    """In-place exclusive scan of (a, b) pairs; P is a power of two."""
    cdef Py_ssize_t s, i, l, r
    cdef floating ta, tb, pa, pb
    s = 1
    while s < P:
        i = 0
        while i < P:
            l = i + s - 1
            r = i + 2 * s - 1
            b[r] = a[r] * b[l] + b[r]
            a[r] = a[r] * a[l]
            i += 2 * s
        s *= 2
    a[P - 1] = 1
    b[P - 1] = 0
    s = P // 2
    while s >= 1:
        i = 0
        while i < P:
            l = i + s - 1
            r = i + 2 * s - 1
            ta = a[l]
            tb = b[l]
            pa = a[r]
            pb = b[r]
            a[l] = pa
            b[l] = pb
            a[r] = ta * pa
            b[r] = ta * pb + tb
            i += 2 * s
        s //= 2


def _dtype_of(floating[:, :, ::1] x):
    if floating is float:
        return np.float32
    return np.float64


def linear_scan_blelloch(floating[:, :, ::1] a, floating[:, :, ::1] b):
    """Inclusive scan of h_t = a_t h_{t-1} + b_t along axis 1 of (B, L, M)."""
    cdef Py_ssize_t B = b.shape[0], L = b.shape[1], M = b.shape[2]
    cdef Py_ssize_t P = _next_pow2(L)
    out = np.empty((B, L, M), dtype=_dtype_of(b))
    cdef floating[:, :, ::1] h = out
    cdef floating* sa = <floating*> malloc(P * sizeof(floating))
    cdef floating* sb = <floating*> malloc(P * sizeof(floating))
    cdef Py_ssize_t bi, m, t
    if sa == NULL or sb == NULL:
        free(sa)
        free(sb)
        raise MemoryError()
    with nogil:
        for bi in range(B):
            for m in range(M):
                for t in range(P):
                    if t < L:
                        sa[t] = a[bi, t, m]
                        sb[t] = b[bi, t, m]
                    else:
                        sa[t] = 1
                        sb[t] = 0
                _blelloch(sa, sb, P)
                for t in range(L):
                    h[bi, t, m] = a[bi, t, m] * sb[t] + b[bi, t, m]
    free(sa)
    free(sb)
    return out


def linear_scan_sequential(floating[:, :, ::1] a, floating[:, :, ::1] b):
    cdef Py_ssize_t B = b.shape[0], L = b.shape[1], M = b.shape[2]
    out = np.empty((B, L, M), dtype=_dtype_of(b))
    cdef floating[:, :, ::1] h = out
    cdef Py_ssize_t bi, m, t
    with nogil:
        for bi in range(B):
            for m in range(M):
                h[bi, 0, m] = b[bi, 0, m]
            for t in range(1, L):
                for m in range(M):
                    h[bi, t, m] = a[bi, t, m] * h[bi, t - 1, m] + b[bi, t, m]
    return out


def forward(floating[:, :, :, ::1] abar, floating[:, :, :, ::1] bbar,
            floating[:, :, ::1] C, floating[:, :, ::1] x, bint parallel=False):
    cdef Py_ssize_t B = abar.shape[0], L = abar.shape[1], D = abar.shape[2], N = abar.shape[3]
    dt = _dtype_of(x)
    y_arr = np.zeros((B, L, D), dtype=dt)
    h_arr = np.empty((B, L, D, N), dtype=dt)
    cdef floating[:, ::1] y = y_arr.reshape(B * L, D)
    cdef floating[:, :, :, ::1] h = h_arr
    cdef Py_ssize_t bi, t, d, n, P
    cdef floating xv, prev, acc
    cdef floating* sa
    cdef floating* sb
    if not parallel:
        with nogil:
            for bi in range(B):
                for t in range(L):
                    for d in range(D):
                        xv = x[bi, t, d]
                        acc = 0
                        for n in range(N):
                            prev = h[bi, t - 1, d, n] if t > 0 else 0
                            prev = abar[bi, t, d, n] * prev + bbar[bi, t, d, n] * xv
                            h[bi, t, d, n] = prev
                            acc = acc + C[bi, t, n] * prev
                        y[bi * L + t, d] = acc
        return y_arr, h_arr
    P = _next_pow2(L)
    sa = <floating*> malloc(P * sizeof(floating))
    sb = <floating*> malloc(P * sizeof(floating))
    if sa == NULL or sb == NULL:
        free(sa)
        free(sb)
        raise MemoryError()
    with nogil:
        for bi in range(B):
            for d in range(D):
                for n in range(N):
                    for t in range(P):
                        if t < L:
                            sa[t] = abar[bi, t, d, n]
                            sb[t] = bbar[bi, t, d, n] * x[bi, t, d]
                        else:
                            sa[t] = 1
                            sb[t] = 0
                    _blelloch(sa, sb, P)
                    for t in range(L):
                        h[bi, t, d, n] = abar[bi, t, d, n] * sb[t] + bbar[bi, t, d, n] * x[bi, t, d]
            for t in range(L):
                for d in range(D):
                    acc = 0
                    for n in range(N):
                        acc = acc + C[bi, t, n] * h[bi, t, d, n]
                    y[bi * L + t, d] = acc
    free(sa)
    free(sb)
    return y_arr, h_arr


def backward(floating[:, :, :, ::1] abar, floating[:, :, :, ::1] bbar,
             floating[:, :, ::1] C, floating[:, :, ::1] x,
             floating[:, :, :, ::1] h, floating[:, :, ::1] gy, bint parallel=False):
    cdef Py_ssize_t B = abar.shape[0], L = abar.shape[1], D = abar.shape[2], N = abar.shape[3]
    dt = _dtype_of(x)
    da_arr = np.empty((B, L, D, N), dtype=dt)
    db_arr = np.empty((B, L, D, N), dtype=dt)
    dC_arr = np.zeros((B, L, N), dtype=dt)
    dx_arr = np.empty((B, L, D), dtype=dt)
    g_arr = np.empty((L, D, N), dtype=dt)
    carry_arr = np.zeros((D, N), dtype=dt)
    cdef floating[:, :, :, ::1] dabar = da_arr
    cdef floating[:, :, :, ::1] dbbar = db_arr
    cdef floating[:, :, ::1] dC = dC_arr
    cdef floating[:, :, ::1] dx = dx_arr
    cdef floating[:, :, ::1] g = g_arr
    cdef floating[:, ::1] carry = carry_arr
    cdef Py_ssize_t bi, t, d, n, s, P = _next_pow2(L)
    cdef floating gv, gyv, xv, acc
    cdef floating* sa = <floating*> malloc(P * sizeof(floating))
    cdef floating* sb = <floating*> malloc(P * sizeof(floating))
    if sa == NULL or sb == NULL:
        free(sa)
        free(sb)
        raise MemoryError()
    with nogil:
        for bi in range(B):
            # adjoint state g_t for every step
            if parallel:
                for d in range(D):
                    for n in range(N):
                        for s in range(P):
                            if s < L:
                                t = L - 1 - s
                                sa[s] = abar[bi, t + 1, d, n] if t + 1 < L else 0
                                sb[s] = C[bi, t, n] * gy[bi, t, d]
                            else:
                                sa[s] = 1
                                sb[s] = 0
                        _blelloch(sa, sb, P)
                        for s in range(L):
                            t = L - 1 - s
                            g[t, d, n] = (abar[bi, t + 1, d, n] if t + 1 < L else 0) * sb[s] + C[bi, t, n] * gy[bi, t, d]
            else:
                for d in range(D):
                    for n in range(N):
                        carry[d, n] = 0
                for t in range(L - 1, -1, -1):
                    for d in range(D):
                        gyv = gy[bi, t, d]
                        for n in range(N):
                            gv = C[bi, t, n] * gyv + carry[d, n]
                            g[t, d, n] = gv
                            carry[d, n] = abar[bi, t, d, n] * gv
            for t in range(L):
                for d in range(D):
                    xv = x[bi, t, d]
                    gyv = gy[bi, t, d]
                    acc = 0
                    for n in range(N):
                        gv = g[t, d, n]
                        dabar[bi, t, d, n] = gv * h[bi, t - 1, d, n] if t > 0 else 0
                        dbbar[bi, t, d, n] = gv * xv
                        acc = acc + gv * bbar[bi, t, d, n]
                        dC[bi, t, n] += gyv * h[bi, t, d, n]
                    dx[bi, t, d] = acc
    free(sa)
    free(sb)
    return da_arr, db_arr, dC_arr, dx_arr
