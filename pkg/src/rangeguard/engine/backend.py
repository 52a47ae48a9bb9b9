"""Backend selection: compiled kernels when available, NumPy reference otherwise.

The choice is made at import time; RANGEGUARD_BACKEND=reference|compiled|auto
overrides it, and set_backend() switches at runtime (used by tests and the
benchmark). Both backends satisfy the same bit-exactness contract, so the
choice never changes results, only speed.
"""

from __future__ import annotations

import os

import numpy as np

from ..numerics import NumericFormat
from . import ops

try:
    from . import _kernels  # compiled extension, optional

    HAVE_COMPILED = True
except ImportError:
    _kernels = None
    HAVE_COMPILED = False


_env = os.environ.get("RANGEGUARD_BACKEND", "auto")
if _env not in ("auto", "compiled", "reference"):
    raise RuntimeError(f"bad RANGEGUARD_BACKEND value {_env!r}")
if _env == "compiled" and not HAVE_COMPILED:
    raise RuntimeError("RANGEGUARD_BACKEND=compiled but extension not built")

_active = "compiled" if (HAVE_COMPILED and _env != "reference") else "reference"


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in ("compiled", "reference"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled backend not available")
    _active = name


def conv2d(xp: np.ndarray, w: np.ndarray, ho: int, wo: int, sh: int, sw: int, fmt: NumericFormat) -> np.ndarray:
    if _active == "compiled":
        if fmt.is_float:
            return _kernels.conv2d_f32(
                np.ascontiguousarray(xp), np.ascontiguousarray(w), ho, wo, sh, sw
            )
        return _kernels.conv2d_fixed(
            np.ascontiguousarray(xp),
            np.ascontiguousarray(w),
            ho,
            wo,
            sh,
            sw,
            fmt.frac_bits,
            fmt.qmin,
            fmt.qmax,
        )
    if fmt.is_float:
        return ops.conv2d_f32(xp, w, ho, wo, sh, sw)
    return ops.conv2d_fixed(xp, w, ho, wo, sh, sw, fmt)


def fully_connected(x: np.ndarray, w: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    if _active == "compiled":
        if fmt.is_float:
            return _kernels.fc_f32(np.ascontiguousarray(x), np.ascontiguousarray(w))
        return _kernels.fc_fixed(
            np.ascontiguousarray(x),
            np.ascontiguousarray(w),
            fmt.frac_bits,
            fmt.qmin,
            fmt.qmax,
        )
    if fmt.is_float:
        return ops.fc_f32(x, w)
    return ops.fc_fixed(x, w, fmt)
