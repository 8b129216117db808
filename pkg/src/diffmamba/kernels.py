"""Scan-kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``DIFFMAMBA_PURE_PYTHON=1``) the numpy implementation is used.  Both expose
``forward``, ``backward``, ``linear_scan_sequential`` and
``linear_scan_blelloch`` with identical contracts.
"""

from __future__ import annotations

import os

from . import _scan_py

_compiled = None
if os.environ.get("DIFFMAMBA_PURE_PYTHON") != "1":
    try:
        from . import _scan_ext as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _scan_py
BACKEND: str = _impl.BACKEND


def available_backends() -> dict:
    out = {"numpy": _scan_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def get_backend(name: str | None = None):
    if name is None:
        return _impl
    try:
        return available_backends()[name]
    except KeyError:
        raise ImportError(f"scan backend {name!r} is not available") from None


def set_backend(name: str) -> None:
    """Switch the process-wide backend (``"numpy"`` or ``"cython"``)."""
    global _impl, BACKEND
    _impl = get_backend(name)
    BACKEND = _impl.BACKEND


def forward(abar, bbar, C, x, parallel=False):
    return _impl.forward(abar, bbar, C, x, parallel)


def backward(abar, bbar, C, x, h, gy, parallel=False):
    return _impl.backward(abar, bbar, C, x, h, gy, parallel)
