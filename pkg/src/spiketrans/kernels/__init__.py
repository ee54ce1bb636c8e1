"""Spike attention-map kernels with backend dispatch.

The compiled Cython core is used when available; a pure-numpy implementation
with identical semantics is the fallback.  Set ``SPIKETRANS_PURE=1`` in the
environment to force the fallback (used by the backend parity tests and the
benchmark).

Both backends compute the attention-map path with additions and subtractions
only — never a general multiply.  When an operation counter is installed
(see :func:`set_active_counters`), each call reports the number of signed
additions it performed; the multiply count of these kernels is zero by
construction.
"""

from __future__ import annotations

import os
import threading

import numpy as np

from . import _pure

try:  # pragma: no cover - exercised indirectly via BACKEND
    from . import _core
except ImportError:  # pragma: no cover
    _core = None

HAVE_COMPILED = _core is not None
_FORCE_PURE = os.environ.get("SPIKETRANS_PURE", "") not in ("", "0")
_impl = _pure if (_FORCE_PURE or not HAVE_COMPILED) else _core
BACKEND = "pure" if _impl is _pure else "compiled"

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "backends",
    "binary_map",
    "ternary_map",
    "masked_value_sum",
    "weighted_value_sum",
    "set_active_counters",
    "active_counters",
]

_HOOK = threading.local()


def set_active_counters(counters) -> None:
    """Install (or clear, with None) the thread's operation counter sink."""
    _HOOK.counters = counters


def active_counters():
    return getattr(_HOOK, "counters", None)


def backends():
    """Mapping of available backend name -> implementation module."""
    out = {"pure": _pure}
    if HAVE_COMPILED:
        out["compiled"] = _core
    return out


def _as3d(x: np.ndarray, row_axis_size: int, col_axis_size: int):
    x = np.ascontiguousarray(x, dtype=np.float32)
    lead = x.shape[:-2]
    flat = x.reshape(-1, row_axis_size, col_axis_size)
    return flat, lead


def _pair3d(a: np.ndarray, b: np.ndarray):
    a3, lead_a = _as3d(a, a.shape[-2], a.shape[-1])
    b3, lead_b = _as3d(b, b.shape[-2], b.shape[-1])
    if lead_a != lead_b or a3.shape[0] != b3.shape[0]:
        raise ValueError(f"kernel batch shapes disagree: {a.shape} vs {b.shape}")
    return a3, b3, lead_a


def binary_map(q: np.ndarray, k: np.ndarray, impl=None) -> np.ndarray:
    """Attention map q @ k^T for binary spikes; add-only accumulation."""
    q3, k3, lead = _pair3d(q, k)
    out = (impl or _impl).binary_map(q3, k3)
    c = active_counters()
    if c is not None:
        c.additions += int(np.count_nonzero(q3)) * k3.shape[1]
    return out.reshape(*lead, q3.shape[1], k3.shape[1])


def ternary_map(q: np.ndarray, k: np.ndarray, impl=None) -> np.ndarray:
    """Attention map q @ k^T for ternary spikes; signed adds only."""
    q3, k3, lead = _pair3d(q, k)
    out = (impl or _impl).ternary_map(q3, k3)
    c = active_counters()
    if c is not None:
        c.additions += int(np.count_nonzero(q3)) * k3.shape[1]
    return out.reshape(*lead, q3.shape[1], k3.shape[1])


def masked_value_sum(mask: np.ndarray, v: np.ndarray, impl=None) -> np.ndarray:
    """Per query, the sum of value rows whose mask bit is set."""
    m3, v3, lead = _pair3d(mask, v)
    out = (impl or _impl).masked_value_sum(m3, v3)
    c = active_counters()
    if c is not None:
        c.additions += int(np.count_nonzero(m3)) * v3.shape[2]
    return out.reshape(*lead, m3.shape[1], v3.shape[2])


def weighted_value_sum(a: np.ndarray, v: np.ndarray, impl=None) -> np.ndarray:
    """Product a @ v for binary v: per set value bit, accumulate a's column."""
    a3, v3, lead = _pair3d(a, v)
    out = (impl or _impl).weighted_value_sum(a3, v3)
    c = active_counters()
    if c is not None:
        c.additions += int(np.count_nonzero(v3)) * a3.shape[1]
    return out.reshape(*lead, a3.shape[1], v3.shape[2])
