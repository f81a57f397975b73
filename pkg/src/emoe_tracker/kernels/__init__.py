"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``EMOE_TRACKER_KERNELS``
(``numba`` or ``numpy``; default ``numba`` when it imports cleanly) and can be
switched at runtime with :func:`set_backend`.
"""
import os

import numpy as np

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_BACKENDS = {"numpy": _numpy}
if _numba is not None:
    _BACKENDS["numba"] = _numba


def _initial_backend():
    name = os.environ.get("EMOE_TRACKER_KERNELS", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"EMOE_TRACKER_KERNELS must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and _numba is None:
        return "numpy"
    return name


_active = _initial_backend()


def get_backend():
    return _active


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    prev, _active = _active, name
    return prev


def available_backends():
    return tuple(_BACKENDS)


def _impl():
    return _BACKENDS[_active]


def accumulate_polarity(xs, ys, ps, height, width):
    """Per-pixel event counts, shape (2, height, width); channel 1 holds p < 0."""
    return _impl().accumulate_polarity(
        np.ascontiguousarray(xs, dtype=np.int64),
        np.ascontiguousarray(ys, dtype=np.int64),
        np.ascontiguousarray(ps, dtype=np.int64),
        int(height),
        int(width),
    )


def emulate_events(prev_log, cur_log, ref_log, t0, t1, threshold):
    """Contrast-threshold event emulation between two log frames.

    ``ref_log`` (float64, C-contiguous) is mutated in place. Events come back
    sorted by timestamp, ties kept in row-major pixel order.
    """
    if ref_log.dtype != np.float64 or not ref_log.flags.c_contiguous:
        raise ValueError("ref_log must be a C-contiguous float64 array")
    xs, ys, ts, ps = _impl().emulate_events(
        np.ascontiguousarray(prev_log, dtype=np.float64),
        np.ascontiguousarray(cur_log, dtype=np.float64),
        ref_log,
        float(t0),
        float(t1),
        float(threshold),
    )
    order = np.argsort(ts, kind="stable")
    return xs[order], ys[order], ts[order], ps[order]


def directional_blur(img, ux, uy, length):
    """Average ``length`` taps along the unit direction (ux, uy), edge-clamped."""
    arr = np.ascontiguousarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    out = _impl().directional_blur(arr, float(ux), float(uy), int(length))
    return out[:, :, 0] if squeeze else out


def success_counts(ious, thresholds):
    """Number of frames with 0 < IoU >= threshold, per threshold."""
    return _impl().success_counts(
        np.ascontiguousarray(ious, dtype=np.float64),
        np.ascontiguousarray(thresholds, dtype=np.float64),
    )


def precision_counts(errors, thresholds):
    """Number of frames with error <= threshold, per threshold."""
    return _impl().precision_counts(
        np.ascontiguousarray(errors, dtype=np.float64),
        np.ascontiguousarray(thresholds, dtype=np.float64),
    )
