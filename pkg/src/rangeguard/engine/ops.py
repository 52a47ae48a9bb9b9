"""Reference kernels: the correctness oracle for the compiled backend.

Accumulation-order contract shared with the compiled kernels so both produce
bit-identical results:

* conv/matmul accumulate per output element over (ky, kx, cin) respectively
  input index, in that order;
* float32 paths accumulate in float64 and round once on store (products of
  float32 operands are exact in float64, so the sequence of rounded adds is
  identical in both backends);
* fixed-point paths accumulate int64 at 2^(2*frac) scale, saturating to the
  output range after every contribution (saturating MAC), then rescale with
  round-half-away-from-zero and saturate on store.
"""

from __future__ import annotations

import numpy as np

from ..numerics import CorrectionPolicy, NumericFormat, quantize_array


def rescale_half_away(acc: np.ndarray, frac_bits: int) -> np.ndarray:
    """Divide int64 raws by 2^frac_bits, rounding half away from zero."""
    if frac_bits == 0:
        return acc
    half = 1 << (frac_bits - 1)
    neg = -((-acc + half) >> frac_bits)
    return np.where(acc >= 0, (acc + half) >> frac_bits, neg)


def div_half_away(acc: np.ndarray, count: int) -> np.ndarray:
    """Integer division rounding half away from zero (for average pooling)."""
    mag = (2 * np.abs(acc) + count) // (2 * count)
    return np.where(acc >= 0, mag, -mag)


def saturate(raws: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    return np.clip(raws, fmt.qmin, fmt.qmax)


def conv2d_f32(xp: np.ndarray, w: np.ndarray, ho: int, wo: int, sh: int, sw: int) -> np.ndarray:
    """xp: padded input [Hp,Wp,Cin] float32; w: [kh,kw,cin,cout]."""
    kh, kw, ci, co = w.shape
    acc = np.zeros((ho, wo, co), dtype=np.float64)
    w64 = w.astype(np.float64)
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[
                ky : ky + (ho - 1) * sh + 1 : sh,
                kx : kx + (wo - 1) * sw + 1 : sw,
                :,
            ].astype(np.float64)
            for c in range(ci):
                acc += xs[:, :, c, None] * w64[ky, kx, c, :]
    return acc.astype(np.float32)


def conv2d_fixed(
    xp: np.ndarray, w: np.ndarray, ho: int, wo: int, sh: int, sw: int, fmt: NumericFormat
) -> np.ndarray:
    """xp, w: int64 raws; returns saturated int64 raws."""
    kh, kw, ci, co = w.shape
    lo2 = fmt.qmin << fmt.frac_bits
    hi2 = fmt.qmax << fmt.frac_bits
    acc = np.zeros((ho, wo, co), dtype=np.int64)
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[
                ky : ky + (ho - 1) * sh + 1 : sh,
                kx : kx + (wo - 1) * sw + 1 : sw,
                :,
            ]
            for c in range(ci):
                acc += xs[:, :, c, None] * w[ky, kx, c, :]
                np.clip(acc, lo2, hi2, out=acc)
    return saturate(rescale_half_away(acc, fmt.frac_bits), fmt)


def fc_f32(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x: [n] float32; w: [n,m] float32."""
    acc = np.zeros(w.shape[1], dtype=np.float64)
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    for i in range(w.shape[0]):
        acc += x64[i] * w64[i, :]
    return acc.astype(np.float32)


def fc_fixed(x: np.ndarray, w: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    lo2 = fmt.qmin << fmt.frac_bits
    hi2 = fmt.qmax << fmt.frac_bits
    acc = np.zeros(w.shape[1], dtype=np.int64)
    for i in range(w.shape[0]):
        acc += x[i] * w[i, :]
        np.clip(acc, lo2, hi2, out=acc)
    return saturate(rescale_half_away(acc, fmt.frac_bits), fmt)


# -- element-wise and structural ops (shared by both backends) -------


def relu(x: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    zero = np.float32(0) if fmt.is_float else 0
    return np.maximum(x, zero)


def tanh(x: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    if fmt.is_float:
        return np.tanh(x.astype(np.float64)).astype(np.float32)
    return quantize_array(np.tanh(x / fmt.scale), fmt)


def atan(x: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    if fmt.is_float:
        return np.arctan(x.astype(np.float64)).astype(np.float32)
    return quantize_array(np.arctan(x / fmt.scale), fmt)


def softmax(x: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    v = x.astype(np.float64) if fmt.is_float else x / fmt.scale
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return out.astype(np.float32) if fmt.is_float else quantize_array(out, fmt)


def bias_add(x: np.ndarray, b: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    if fmt.is_float:
        return x + b
    return saturate(x + b, fmt)


def _pool_slices(x: np.ndarray, wh: int, ww: int, sh: int, sw: int):
    h, w = x.shape[0], x.shape[1]
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    for wy in range(wh):
        for wx in range(ww):
            yield x[
                wy : wy + (ho - 1) * sh + 1 : sh,
                wx : wx + (wo - 1) * sw + 1 : sw,
                :,
            ]


def max_pool(x: np.ndarray, wh: int, ww: int, sh: int, sw: int) -> np.ndarray:
    out = None
    for xs in _pool_slices(x, wh, ww, sh, sw):
        out = xs.copy() if out is None else np.maximum(out, xs)
    return out


def avg_pool(x: np.ndarray, wh: int, ww: int, sh: int, sw: int, fmt: NumericFormat) -> np.ndarray:
    acc = None
    for xs in _pool_slices(x, wh, ww, sh, sw):
        term = xs.astype(np.float64) if fmt.is_float else xs.astype(np.int64)
        acc = term.copy() if acc is None else acc + term
    count = wh * ww
    if fmt.is_float:
        return (acc / count).astype(np.float32)
    return saturate(div_half_away(acc, count), fmt)


def clip_apply(
    x: np.ndarray,
    low: float,
    up: float,
    policy: CorrectionPolicy,
    fmt: NumericFormat,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Range restriction on a whole activation array.

    Fixed-point bounds are snapped inward (ceil(low), floor(up) at raw
    granularity) so restricted values stay within [low, up] after decoding.
    """
    if fmt.is_float:
        lo, hi = np.float32(low), np.float32(up)
    else:
        lo = int(np.ceil(low * fmt.scale))
        hi = int(np.floor(up * fmt.scale))
        lo, hi = max(lo, fmt.qmin), min(hi, fmt.qmax)
    if policy is CorrectionPolicy.TO_BOUND:
        return np.minimum(np.maximum(x, lo), hi)
    in_range = (x >= lo) & (x <= hi)
    if policy is CorrectionPolicy.TO_ZERO:
        zero = np.float32(0) if fmt.is_float else 0
        return np.where(in_range, x, zero)
    if policy is CorrectionPolicy.RANDOM_IN_RANGE:
        if rng is None:
            raise ValueError("random policy requires a generator")
        draws = rng.uniform(low, up, size=x.shape)
        if fmt.is_float:
            repl = draws.astype(np.float32)
        else:
            repl = np.clip(quantize_array(draws, fmt), lo, hi)
        return np.where(in_range, x, repl)
    raise ValueError(f"unhandled policy {policy}")
